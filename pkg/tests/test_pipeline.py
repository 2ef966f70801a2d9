import csv

import pytest
import torch

from guidedit import config as cfgmod
from guidedit.backends import VocabEncoder, embed_prompt
from guidedit.cli import cli_main
from guidedit.ddim import TrajectoryCache, run_inversion, run_reverse
from guidedit.errors import ConfigError
from guidedit.guidance import GuidanceConfig
from guidedit.imgio import load_image, save_image
from guidedit.pipeline import replace_token, run_edit
from guidedit.schedule import build_schedule
from guidedit.task import EditTask

from conftest import CAT, make_gmm_backend, make_vocab_encoder


# ---------------------------------------------------------------------------
# token replacement


def test_replace_token_exact_token():
    enc = make_vocab_encoder()
    assert replace_token("a cat sitting on grass", "cat", "dog", enc) \
        == "a dog sitting on grass"


def test_replace_token_nearest_neighbor_scan():
    # vocabulary pins every token; 'kitten' embeds closest to 'cat'
    def unit(i):
        v = torch.zeros(6, dtype=torch.float64)
        v[i] = 1.0
        return v

    kitten = torch.zeros(6, dtype=torch.float64)
    kitten[0], kitten[1] = 0.9, 0.1
    enc = VocabEncoder(vocab={"cat": unit(0), "dog": unit(1), "kitten": kitten,
                              "a": unit(2), "on": unit(3), "sofa": unit(4)},
                       embed_dim=6)
    prompt = "a kitten on a sofa"
    got = replace_token(prompt, "cat", "dog", enc)
    # oracle: exhaustive scan over token similarities
    from guidedit.backends import cosine_sim, tokenize

    concept = enc.encode_text("cat")
    sims = [float(cosine_sim(enc.encode_text(tok), concept))
            for tok in tokenize(prompt)]
    best = sims.index(max(sims))
    toks = prompt.split()
    toks[best] = "dog"
    assert got == " ".join(toks) == "a dog on a sofa"


def test_replace_token_single_token_prompt():
    enc = make_vocab_encoder()
    assert replace_token("cat", "cat", "dog", enc) == "dog"


def test_replace_token_empty_prompt_errors():
    with pytest.raises(ValueError):
        replace_token("", "cat", "dog", make_vocab_encoder())


# ---------------------------------------------------------------------------
# run_edit on a real file task


def _write_test_image(path, h=8, w=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(3, h, w, dtype=torch.float64, generator=g)
    save_image(img, path)
    return load_image(path)


def _image_backend(schedule, shape):
    cfg_map = {"backend.kind": "gmm"}
    return cfgmod.build_backend_from_config(cfg_map, schedule, shape)


def test_run_edit_outputs_and_trace(tmp_path):
    src = tmp_path / "src.png"
    img = _write_test_image(src)
    sched = build_schedule(400, 8)
    backend = _image_backend(sched, tuple(img.shape))
    task = EditTask(source_image=src, p_src="a cat", p_tgt="a dog",
                    output_image=tmp_path / "out.png",
                    trace_path=tmp_path / "trace.csv",
                    cache_path=tmp_path / "cache.bin", seed=3)
    out, trace = run_edit(task, sched, backend, GuidanceConfig(), timings=True)
    assert (tmp_path / "out.png").exists()
    assert (tmp_path / "trace.csv").exists()
    assert (tmp_path / "trace.png").exists()  # figure alongside the CSV
    assert (tmp_path / "cache.bin").exists()
    # trace completeness: one record per reverse step
    assert len(trace.records) == sched.T
    assert trace.total_ms > 0
    # aspect ratio preserved
    out_img = load_image(tmp_path / "out.png")
    assert out_img.shape == img.shape


def test_run_edit_identical_prompts_zero_guidance_reconstructs(tmp_path):
    src = tmp_path / "src.png"
    img = _write_test_image(src, seed=5)
    sched = build_schedule(1000, 50)
    backend = _image_backend(sched, tuple(img.shape))
    task = EditTask(source_image=src, p_src="same prompt", p_tgt="same prompt")
    cfg = GuidanceConfig(lambda1=0.0, lambda2=0.0)
    out, _ = run_edit(task, sched, backend, cfg, timings=False, figures=False)
    # matches the measured plain round-trip error of the same backend
    x0 = backend.encode(img)
    y = embed_prompt(backend, "same prompt")
    x_T, _ = run_inversion(x0, y, sched, backend)
    round_trip = run_reverse(x_T, y, sched, backend)
    tau = float(torch.linalg.vector_norm(round_trip - x0))
    err = float(torch.linalg.vector_norm(backend.decode(out) - x0))
    assert err <= tau * (1 + 1e-6) + 1e-9


def test_run_edit_determinism_byte_identical(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src, seed=7)
    sched = build_schedule(400, 8)
    backend = _image_backend(sched, (3, 8, 8))

    def run(tag):
        task = EditTask(source_image=src, p_src="a cat", p_tgt="a dog",
                        output_image=tmp_path / f"out{tag}.png",
                        trace_path=tmp_path / f"trace{tag}.csv",
                        cache_path=tmp_path / f"cache{tag}.bin", seed=11)
        run_edit(task, sched, backend, GuidanceConfig(), timings=False)

    run("A")
    run("B")
    for stem in ("out", "trace", "cache"):
        ext = {"out": ".png", "trace": ".csv", "cache": ".bin"}[stem]
        a = (tmp_path / f"{stem}A{ext}").read_bytes()
        b = (tmp_path / f"{stem}B{ext}").read_bytes()
        assert a == b, f"{stem} artifacts differ between identical runs"


def test_run_edit_aborts_without_partial_outputs(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src)
    sched = build_schedule(400, 8)
    cfg_map = {"backend.kind": "constant", "backend.constant": "inf"}
    backend = cfgmod.build_backend_from_config(cfg_map, sched, (3, 8, 8))
    task = EditTask(source_image=src, p_src="a", p_tgt="b",
                    output_image=tmp_path / "out.png",
                    trace_path=tmp_path / "trace.csv")
    from guidedit.errors import NumericGuardError

    with pytest.raises(NumericGuardError) as exc:
        run_edit(task, sched, backend, GuidanceConfig(), timings=False)
    assert "stage" in str(exc.value)
    assert not (tmp_path / "out.png").exists()
    assert not (tmp_path / "trace.csv").exists()


# ---------------------------------------------------------------------------
# config


def test_parse_config_reports_line_numbers():
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse_config_text("a=1\nnot a pair\n")
    assert "line 2" in str(exc.value)


def test_parse_config_skips_comments_and_blanks():
    out = cfgmod.parse_config_text("# comment\n\nguidance.lambda1=2.0\n")
    assert out == {"guidance.lambda1": "2.0"}


def test_guidance_from_config_coherence_gate():
    cfg = cfgmod.build_guidance_from_config(
        {"coherence.lambda3": "0.3", "coherence.lambda4": "0.4"})
    assert cfg.lambda3 == 0.0 and cfg.lambda4 == 0.0  # switch defaults off
    cfg = cfgmod.build_guidance_from_config(
        {"coherence.enabled": "true", "coherence.lambda3": "0.3",
         "coherence.lambda4": "0.4"})
    assert cfg.lambda3 == 0.3 and cfg.lambda4 == 0.4


def test_bad_numeric_field_reports_field_name():
    with pytest.raises(ConfigError) as exc:
        cfgmod.build_guidance_from_config({"guidance.lambda1": "abc"})
    assert "guidance.lambda1" in str(exc.value)


def test_backend_serialize_round_trip():
    sched, backend = make_gmm_backend()
    block = cfgmod.serialize_backend(backend)
    cfg_map = cfgmod.parse_config_text(block)
    rebuilt = cfgmod.build_backend_from_config(cfg_map, sched, (2,))
    assert torch.allclose(rebuilt.mixture.means, backend.mixture.means)
    assert torch.allclose(rebuilt.mixture.weights, backend.mixture.weights)
    assert sorted(rebuilt.prompt_mixtures) == sorted(backend.prompt_mixtures)
    y = embed_prompt(backend, CAT)
    x = torch.tensor([0.7, 1.1], dtype=torch.float64)
    assert torch.allclose(rebuilt.epsilon(x, 4, y), backend.epsilon(x, 4, y),
                          atol=1e-15)


def test_schedule_from_config_explicit_list():
    sched = cfgmod.build_schedule_from_config(
        {"schedule.family": "explicit-list", "schedule.alphas": "0.9,0.5,0.2"})
    assert sched.T == 3 and sched.alpha(2) == pytest.approx(0.2)


def test_schedule_bit_exact_reload_from_serialized_block():
    for family, kwargs in (("linear-beta", {}), ("cosine", {}),
                           ("explicit-list", {"alphas": [0.9, 0.5, 0.2]})):
        sched = cfgmod.build_schedule_from_config(
            {"schedule.family": family, "schedule.grid_steps": "5",
             "schedule.total_steps": "40",
             **({"schedule.alphas": "0.9,0.5,0.2"}
                if family == "explicit-list" else {})})
        reloaded = cfgmod.build_schedule_from_config(
            cfgmod.parse_config_text(sched.serialize()))
        assert torch.equal(reloaded.alphas, sched.alphas)
        assert reloaded.timestep_grid == sched.timestep_grid
        assert reloaded.fingerprint() == sched.fingerprint()


# ---------------------------------------------------------------------------
# CLI


def _backend_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "backend.kind=gmm\n"
        "backend.embed_dim=4\n"
        "schedule.total_steps=400\n"
        "schedule.grid_steps=8\n")
    return path


def test_cli_edit_happy_path(tmp_path, capsys):
    src = tmp_path / "src.png"
    _write_test_image(src)
    cfg = _backend_config_file(tmp_path)
    code = cli_main(["edit", "--src", str(src), "--src-prompt", "a cat",
                     "--tgt-prompt", "a dog", "--out", str(tmp_path / "out.png"),
                     "--trace", str(tmp_path / "trace.csv"),
                     "--config", str(cfg), "--steps", "8"])
    assert code == 0
    assert (tmp_path / "out.png").exists()
    assert (tmp_path / "trace.csv").exists()
    assert (tmp_path / "trace.png").exists()


def test_cli_edit_missing_src_is_usage_error(capsys):
    code = cli_main(["edit", "--src-prompt", "a", "--tgt-prompt", "b"])
    assert code == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_unknown_flag_is_usage_error(capsys):
    code = cli_main(["edit", "--nonsense"])
    assert code == 1


def test_cli_numeric_guard_exit_code(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("backend.kind=constant\nbackend.constant=inf\n"
                   "schedule.grid_steps=4\nschedule.total_steps=400\n")
    code = cli_main(["edit", "--src", str(src), "--src-prompt", "a",
                     "--tgt-prompt", "b", "--out", str(tmp_path / "out.png"),
                     "--config", str(cfg)])
    assert code == 2


def test_cli_malformed_config_exit_code(tmp_path, capsys):
    src = tmp_path / "src.png"
    _write_test_image(src)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("schedule.grid_steps\n")
    code = cli_main(["edit", "--src", str(src), "--src-prompt", "a",
                     "--tgt-prompt", "b", "--config", str(cfg)])
    assert code == 1
    assert "line 1" in capsys.readouterr().err


def test_cli_invert_writes_cache(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src)
    cfg = _backend_config_file(tmp_path)
    cache = tmp_path / "cache.bin"
    code = cli_main(["invert", "--src", str(src), "--src-prompt", "a cat",
                     "--cache", str(cache), "--config", str(cfg)])
    assert code == 0
    loaded = TrajectoryCache.load(cache)
    assert loaded.levels() == list(range(8))


def test_cli_invert_requires_cache(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src)
    code = cli_main(["invert", "--src", str(src), "--src-prompt", "a"])
    assert code == 1


def test_cli_edit_plus_runs(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src)
    cfg = _backend_config_file(tmp_path)
    code = cli_main(["edit-plus", "--src", str(src), "--src-prompt", "a cat",
                     "--tgt-prompt", "a dog", "--out", str(tmp_path / "out.png"),
                     "--lambda3", "0.05", "--lambda4", "0.05",
                     "--config", str(cfg), "--steps", "6", "--no-figures"])
    assert code == 0
    assert (tmp_path / "out.png").exists()


def test_cli_metrics_subcommand(tmp_path, capsys):
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    _write_test_image(a, seed=1)
    _write_test_image(b, seed=2)
    mask = tmp_path / "mask.png"
    save_image(torch.ones(3, 8, 8, dtype=torch.float64), mask)  # all background
    manifest = tmp_path / "pairs.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "src", "tgt", "prompt", "mask"])
        writer.writerow(["p0", str(a), str(b), "a dog", str(mask)])
        writer.writerow(["p1", str(a), str(a), "a dog", ""])
    out = tmp_path / "report.csv"
    code = cli_main(["metrics", "--manifest", str(manifest), "--out", str(out)])
    assert code == 0
    assert out.exists()
    assert (tmp_path / "report.png").exists()
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pair_id", "cs", "sd", "bd"]
    by_id = {r[0]: r for r in rows[1:3]}
    assert float(by_id["p1"][2]) == 0.0  # identical pair has zero SD
    assert by_id["p1"][3] == ""


def test_cli_selftest(capsys):
    assert cli_main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_cli_determinism_byte_identical_artifacts(tmp_path):
    src = tmp_path / "src.png"
    _write_test_image(src, seed=9)
    cfg = _backend_config_file(tmp_path)

    def run(tag):
        out = tmp_path / f"out{tag}.png"
        trace = tmp_path / f"trace{tag}.csv"
        cache = tmp_path / f"cache{tag}.bin"
        code = cli_main(["edit", "--src", str(src), "--src-prompt", "a cat",
                         "--tgt-prompt", "a dog", "--out", str(out),
                         "--trace", str(trace), "--cache", str(cache),
                         "--config", str(cfg), "--seed", "4",
                         "--trace-timings", "off"])
        assert code == 0
        return out.read_bytes(), trace.read_bytes(), cache.read_bytes(), \
            (tmp_path / f"trace{tag}.png").read_bytes()

    assert run("A") == run("B")
