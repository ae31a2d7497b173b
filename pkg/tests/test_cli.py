import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from slatmorph.assets import AssetDescriptor, build_asset
from slatmorph.cli import build_run, load_config, main
from slatmorph.flow_model import ConditionTokens, Slat, write_ctok, write_slat
from slatmorph.geometry import SparseStructure, rotate_yaw


@pytest.fixture
def assets(tmp_path):
    for name, desc in (("bar", "bar"), ("tee", "tee,color_seed=2")):
        assert main(["gen-asset", desc, "--out", str(tmp_path / "assets" / name)]) == 0
    return tmp_path


def write_config(path, text):
    path.write_text(text)
    return str(path)


def strip_timings(doc):
    for f in doc["frames"]:
        f.pop("timings")
    return doc


class TestGenAsset:
    def test_files_and_determinism(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-asset", "ell,yaw=2", "--out", str(tmp_path / d)]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["asset.ctok", "asset.ssv", "pose.json"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        pose = json.loads((tmp_path / "a" / "pose.json").read_text())
        assert pose["pose"]["yaw"] == 180.0

    @pytest.mark.parametrize("desc", ["pyramid", "bar,yaw=5", "bar,colour=1"])
    def test_bad_descriptor(self, tmp_path, desc, capsys):
        assert main(["gen-asset", desc, "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestConfig:
    def test_minimal_defaults(self, assets):
        cfg = write_config(assets / "c.toml", 'source = "assets/bar"\ntarget = "assets/tee"\n')
        morpher, echo = build_run(load_config(cfg))
        assert morpher.cfg.N == 49 and morpher.cfg.frames == 50
        assert morpher.cfg.attn.cross_mode == "mca" and morpher.cfg.beta == 0.2
        assert echo == {"mode": "morph", "source": "assets/bar", "target": "assets/tee"}

    def test_inline_assets_and_fields(self, tmp_path):
        cfg = write_config(tmp_path / "c.toml", """
source = "asset:bar"
target = "asset:cross,yaw=1"
N = 7
beta = 0.5
cross_mode = "kv_fused"
self_stages = ["slat"]
oc_enabled = false
steps = 8
model_seed = 3
""")
        morpher, _ = build_run(load_config(cfg))
        c = morpher.cfg
        assert (c.N, c.beta, c.attn.cross_mode, c.attn.self_stages, c.oc_enabled) == (7, 0.5, "kv_fused", ("slat",), False)
        assert c.model.steps == 8 and c.model.seed == 3

    def test_seed_precedence(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path / "c.toml", 'source = "asset:bar"\ntarget = "asset:tee"\nseed = 4\n')
        assert build_run(load_config(cfg))[0].cfg.seed == 4
        monkeypatch.setenv("MORPH_SEED", "9")
        assert build_run(load_config(cfg))[0].cfg.seed == 9
        assert build_run(load_config(cfg), seed_override=11)[0].cfg.seed == 11

    @pytest.mark.parametrize("text,needle", [
        ('source = "asset:bar"\ntarget = \n', "line 2"),
        ('source = "asset:bar"\ntarget = "asset:tee"\nbogus = 1\n', "bogus"),
        ('source = "asset:bar"\ntarget = "asset:tee"\nN = "many"\n', "'N'"),
        ('source = "asset:bar"\ntarget = "asset:tee"\noc_enabled = 1\n', "oc_enabled"),
        ('source = "asset:bar"\n', "target"),
        ('source = "asset:bar"\ntarget = "asset:tee"\nN = 0\n', "N"),
        ('source = "asset:bar"\ntarget = "asset:tee"\ncross_mode = "magic"\n', "cross_mode"),
        ('source = "asset:bar"\ntarget = "asset:tee"\nmode = "disentangled"\n', "frozen"),
        ('source = "asset:bar"\ntarget = "assets/missing"\n', "target"),
    ])
    def test_errors_exit_2(self, tmp_path, text, needle, capsys):
        cfg = write_config(tmp_path / "c.toml", text)
        assert main(["morph", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert needle in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["morph", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2


class TestMorphCommand:
    def test_run_and_rerun(self, assets):
        cfg = write_config(assets / "c.toml", 'source = "assets/bar"\ntarget = "assets/tee"\nN = 2\n')
        for out in ("r1", "r2"):
            assert main(["morph", "--config", cfg, "--out", str(assets / out)]) == 0
        a = json.loads((assets / "r1" / "sequence.json").read_text())
        b = json.loads((assets / "r2" / "sequence.json").read_text())
        assert strip_timings(a) == strip_timings(b)
        assert a["inputs"]["target"] == "assets/tee"
        for f in (assets / "r1" / "frames").iterdir():
            assert f.read_bytes() == (assets / "r2" / "frames" / f.name).read_bytes()

    def test_resume_flags(self, assets):
        cfg = write_config(assets / "c.toml", 'source = "assets/bar"\ntarget = "assets/tee"\nN = 3\n')
        assert main(["morph", "--config", cfg, "--out", str(assets / "full")]) == 0
        assert main(["morph", "--config", cfg, "--out", str(assets / "part"), "--stop", "1"]) == 0
        assert main(["morph", "--config", cfg, "--out", str(assets / "part"), "--start", "2"]) == 0
        for f in (assets / "full" / "frames").iterdir():
            assert f.read_bytes() == (assets / "part" / "frames" / f.name).read_bytes()

    def test_bad_range(self, assets):
        cfg = write_config(assets / "c.toml", 'source = "assets/bar"\ntarget = "assets/tee"\nN = 3\n')
        assert main(["morph", "--config", cfg, "--out", str(assets / "x"), "--start", "5"]) == 2

    def test_pipeline_failure_exit_1(self, assets, capsys):
        tokens = build_asset(AssetDescriptor("tee")).condition.tokens.copy()
        tokens[:, 16] = 0.0
        (assets / "assets" / "flat").mkdir()
        write_ctok(assets / "assets" / "flat" / "asset.ctok", ConditionTokens(tokens))
        cfg = write_config(assets / "c.toml",
                           'source = "assets/bar"\ntarget = "assets/flat"\nN = 1\nself_mode = "vanilla"\n')
        assert main(["morph", "--config", cfg, "--out", str(assets / "o")]) == 1
        assert "frame 1" in capsys.readouterr().err

    def test_module_entry_point(self, assets):
        proc = subprocess.run([sys.executable, "-m", "slatmorph", "morph", "--config", str(assets / "nope.toml"),
                               "--out", str(assets / "o")], capture_output=True, text=True)
        assert proc.returncode == 2


def write_frames(d, structures, colors=0.0):
    (d / "frames").mkdir(parents=True)
    for i, P in enumerate(structures):
        write_slat(d / "frames" / f"{i:03d}.slat", Slat(P, np.full((len(P), 8), colors)))


class TestMetricsCommand:
    def test_identical_frames(self, tmp_path, capsys):
        P = build_asset(AssetDescriptor("bar")).structure
        write_frames(tmp_path / "run", [P] * 4)
        assert main(["metrics", "--frames", str(tmp_path / "run"), "--out", str(tmp_path / "m")]) == 0
        doc = json.loads((tmp_path / "m" / "metrics.json").read_text())
        assert doc == {"ppl": 0.0, "pdv": 0.0, "ffd": None, "n_frames": 4}
        assert json.loads(capsys.readouterr().out) == doc
        rows = list(csv.reader(io.StringIO((tmp_path / "m" / "gaps.csv").read_text())))
        assert len(rows) == 4

    def test_reference(self, tmp_path):
        bar = build_asset(AssetDescriptor("bar")).structure
        tee = build_asset(AssetDescriptor("tee")).structure
        write_frames(tmp_path / "run", [bar, tee, bar])
        write_frames(tmp_path / "ref", [bar, tee])
        assert main(["metrics", "--frames", str(tmp_path / "run"), "--reference", str(tmp_path / "ref"),
                     "--out", str(tmp_path / "m")]) == 0
        doc = json.loads((tmp_path / "m" / "metrics.json").read_text())
        assert doc["ffd"] > 0 and doc["ppl"] > 0

    def test_too_few_frames(self, tmp_path):
        write_frames(tmp_path / "run", [build_asset(AssetDescriptor("bar")).structure] * 2)
        assert main(["metrics", "--frames", str(tmp_path / "run")]) == 2

    def test_not_a_directory(self, tmp_path):
        assert main(["metrics", "--frames", str(tmp_path / "nothing")]) == 2


class TestAnalyzeOrient:
    def test_injected_jump_and_skips(self, tmp_path, capsys):
        bar = build_asset(AssetDescriptor("bar")).structure
        blob = build_asset(AssetDescriptor("blob")).structure
        frames = [bar] * 5 + [rotate_yaw(bar, 1)] * 5 + [blob]
        write_frames(tmp_path / "run", frames)
        alphas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.55, 0.6, 0.7, 0.8, 0.9, 1.0]
        (tmp_path / "run" / "sequence.json").write_text(json.dumps(
            {"config": {"model": {"seed": 0}}, "frames": [{"alpha": a} for a in alphas]}))
        out = tmp_path / "stats.csv"
        assert main(["analyze-orient", "--frames", str(tmp_path / "run"), "--out", str(out)]) == 0
        assert "skipped frames: 1" in capsys.readouterr().out
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert rows[0] == ["kind", "bin_low", "bin_high", "count"] and len(rows) == 51
        jump_alpha = {(r[1], r[2]): int(r[3]) for r in rows if r[0] == "alpha_at_jump"}
        assert jump_alpha[("0.5", "0.6")] == 1 and sum(jump_alpha.values()) == 1
        yaw_jump = {r[1]: int(r[3]) for r in rows if r[0] == "yaw_delta_at_jump"}
        assert yaw_jump["45"] == 1 and sum(yaw_jump.values()) == 1

    def test_no_jumps(self, tmp_path):
        write_frames(tmp_path / "run", [build_asset(AssetDescriptor("ell")).structure] * 3)
        out = tmp_path / "s.csv"
        assert main(["analyze-orient", "--frames", str(tmp_path / "run"), "--out", str(out)]) == 0
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert all(r[3] == "0" for r in rows if r[0].endswith("_at_jump"))

    def test_multiple_dirs(self, tmp_path):
        bar = build_asset(AssetDescriptor("bar")).structure
        # a half turn of a bar is invisible to PCA; a quarter turn is not
        write_frames(tmp_path / "a", [bar, rotate_yaw(bar, 2), rotate_yaw(bar, 3)])
        write_frames(tmp_path / "b", [bar, bar, rotate_yaw(bar, 1)])
        out = tmp_path / "s.csv"
        assert main(["analyze-orient", "--frames", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(out)]) == 0
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert sum(int(r[3]) for r in rows if r[0] == "alpha_at_jump") == 2

    def test_nothing_orientable(self, tmp_path):
        write_frames(tmp_path / "run", [build_asset(AssetDescriptor("blob")).structure] * 3)
        assert main(["analyze-orient", "--frames", str(tmp_path / "run")]) == 2


class TestExport:
    def test_single_voxel(self, tmp_path):
        write_slat(tmp_path / "one.slat", Slat(SparseStructure(16, [(3, 4, 5)]), np.zeros((1, 8))))
        assert main(["export", str(tmp_path / "one.slat")]) == 0
        lines = (tmp_path / "one.obj").read_text().splitlines()
        verts = [l for l in lines if l.startswith("v ")]
        faces = [l for l in lines if l.startswith("f ")]
        assert len(verts) == 8 and len(faces) == 12
        assert all(len(v.split()) == 7 for v in verts)
        assert {int(i) for f in faces for i in f.split()[1:]} == set(range(1, 9))

    def test_vertex_count_and_determinism(self, tmp_path):
        P = build_asset(AssetDescriptor("tee")).structure
        write_slat(tmp_path / "t.slat", Slat(P, np.zeros((len(P), 8))))
        for out in ("a.obj", "b.obj"):
            assert main(["export", str(tmp_path / "t.slat"), "--out", str(tmp_path / out)]) == 0
        text = (tmp_path / "a.obj").read_text()
        assert text == (tmp_path / "b.obj").read_text()
        assert sum(l.startswith("v ") for l in text.splitlines()) == 8 * len(P)

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.slat").write_bytes(b"SLAT1garbage")
        assert main(["export", str(tmp_path / "bad.slat")]) == 2
        assert main(["export", str(tmp_path / "missing.slat")]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
