import csv
import json
import shutil

import numpy as np
import pytest

from atomdiff.cli import main
from atomdiff.datasets import dumps_jsonl, load_jsonl, write_cif_lite
from atomdiff.geometry import AtomicSystem, lattice_params_to_matrix, LatticeParams
from atomdiff.synthetic import synthetic_corpus

TINY = """seed: 3
n_max: 12
vae: {d_model: 16, n_heads: 2, n_layers: 1, latent_dim: 4, batch_size: 4, epochs: 2, lr: 1.0e-3}
dit: {preset: XS, d_model: 32, n_heads: 4, n_layers: 1, batch_size: 4, epochs: 2, lr: 1.0e-3, ema_decay: 0.9}
sampling: {steps: 10, guidance: 1.0, num_samples: 2}
"""

WATER = "3\nwater\nO 0 0 0.117\nH 0 0.757 -0.467\nH 0 -0.757 -0.467\n"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A trained tiny VAE + DiT pair shared by the tests below."""
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.yaml").write_text(TINY)
    (root / "corpus.jsonl").write_text(dumps_jsonl(synthetic_corpus(4, 4, seed=1)))
    cfg, data = str(root / "tiny.yaml"), str(root / "corpus.jsonl")
    assert main(["train-vae", "--config", cfg, "--data", data, "--out-dir", str(root / "vae")]) == 0
    assert main(["train-dit", "--config", cfg, "--vae", str(root / "vae" / "vae_ckpt"), "--data", data,
                 "--out-dir", str(root / "dit")]) == 0
    return root


class TestImport:
    def test_empty_directory(self, tmp_path, caplog):
        (tmp_path / "in").mkdir()
        assert main(["import", str(tmp_path / "in"), "--out", str(tmp_path / "o.jsonl")]) == 0
        assert (tmp_path / "o.jsonl").read_text() == ""
        assert "no structures" in caplog.text

    def test_mixed_directory(self, tmp_path, capsys):
        src = tmp_path / "in"
        src.mkdir()
        (src / "water.xyz").write_text(WATER)
        (src / "h2.xyz").write_text("2\n\nH 0 0 0\nH 0 0 0.74\n")
        lattice = lattice_params_to_matrix(LatticeParams(4, 4.2, 5, 90, 95, 90))
        (src / "nacl.cif").write_text(write_cif_lite(AtomicSystem.crystal([11, 17], [[0, 0, 0], [0.5, 0.5, 0.5]], lattice)))
        (src / "notes.txt").write_text("ignored")
        assert main(["import", str(src), "--out", str(tmp_path / "o.jsonl")]) == 0
        assert "xyz=2 cif=1 jsonl=0 total=3" in capsys.readouterr().out
        recs = load_jsonl(tmp_path / "o.jsonl")
        assert sorted(r.id for r in recs) == ["h2.xyz", "nacl.cif", "water.xyz"]
        manifest = json.loads((tmp_path / "o.jsonl.manifest.json").read_text())
        assert manifest["command"] == "import" and manifest["seed"] == 0 and "version" in manifest

    def test_niggli_at_import(self, tmp_path):
        skew = np.array([[4.0, 0, 0], [3.6, 4, 0], [0, 0, 4]])
        (tmp_path / "x.cif").write_text(write_cif_lite(AtomicSystem.crystal([11, 17], [[0, 0, 0], [0.5, 0.5, 0.5]], skew)))
        assert main(["import", str(tmp_path / "x.cif"), "--out", str(tmp_path / "o.jsonl")]) == 0
        (rec,) = load_jsonl(tmp_path / "o.jsonl")
        assert np.linalg.norm(rec.system.lattice, axis=1).max() < np.linalg.norm(skew, axis=1).max()

    def test_reimport_is_byte_identical(self, tmp_path):
        src = tmp_path / "c.jsonl"
        src.write_text(dumps_jsonl(synthetic_corpus(20, 20, seed=2)))
        assert main(["import", str(src), "--out", str(tmp_path / "a.jsonl")]) == 0
        assert main(["import", str(tmp_path / "a.jsonl"), "--out", str(tmp_path / "b.jsonl")]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_hydrogen_stripping(self, tmp_path):
        (tmp_path / "w.xyz").write_text(WATER)
        assert main(["import", str(tmp_path / "w.xyz"), "--out", str(tmp_path / "o.jsonl"),
                     "--set", "include_hydrogens=false"]) == 0
        assert load_jsonl(tmp_path / "o.jsonl")[0].system.atom_types.tolist() == [8]

    def test_bad_file_is_data_error(self, tmp_path, capsys):
        (tmp_path / "bad.xyz").write_text("2\n\nH 0 0 0\n")
        assert main(["import", str(tmp_path / "bad.xyz"), "--out", str(tmp_path / "o.jsonl")]) == 2
        assert "bad.xyz" in capsys.readouterr().err

    def test_input_untouched(self, tmp_path):
        (tmp_path / "w.xyz").write_text(WATER)
        main(["import", str(tmp_path / "w.xyz"), "--out", str(tmp_path / "o.jsonl")])
        assert (tmp_path / "w.xyz").read_text() == WATER


class TestUsage:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_bad_override(self, tmp_path):
        assert main(["import", str(tmp_path), "--out", str(tmp_path / "o.jsonl"), "--set", "nope=1"]) == 1

    def test_help(self):
        assert main(["--help"]) == 0

    def test_dit_without_vae(self, tmp_path, capsys):
        assert main(["train-dit", "--out-dir", str(tmp_path / "d"), "--data", "x.jsonl"]) == 1
        assert "VAE" in capsys.readouterr().err
        assert main(["train-dit", "--vae", str(tmp_path / "missing"), "--out-dir", str(tmp_path / "d")]) == 2


class TestTraining:
    def test_checkpoints_written(self, run):
        assert (run / "vae" / "vae_ckpt" / "manifest.json").is_file()
        assert (run / "dit" / "dit_ckpt" / "manifest.json").is_file()
        manifest = json.loads((run / "dit" / "run_manifest.json").read_text())
        assert manifest["command"] == "train-dit" and manifest["config"]["vae"]["latent_dim"] == 4

    def test_resume_matches_uninterrupted(self, run, tmp_path):
        cfg, data = str(run / "tiny.yaml"), str(run / "corpus.jsonl")
        full, part = tmp_path / "full", tmp_path / "part"
        assert main(["train-vae", "--config", cfg, "--data", data, "--out-dir", str(full), "--set", "vae.epochs=3"]) == 0
        assert main(["train-vae", "--config", cfg, "--data", data, "--out-dir", str(part), "--set", "vae.epochs=1"]) == 0
        assert main(["train-vae", "--config", cfg, "--data", data, "--out-dir", str(part), "--set", "vae.epochs=3",
                     "--resume"]) == 0
        assert (full / "train_log.jsonl").read_bytes() == (part / "train_log.jsonl").read_bytes()
        for f in (full / "vae_ckpt" / "params").iterdir():
            assert f.read_bytes() == (part / "vae_ckpt" / "params" / f.name).read_bytes()


class TestSampleEval:
    def _sample(self, run, out, cls="molecule", *extra):
        return main(["sample", "--config", str(run / "tiny.yaml"), "--dit", str(run / "dit" / "dit_ckpt"),
                     "--class", cls, "--out", str(out), *extra])

    def test_smoke_and_determinism(self, run, tmp_path, capsys):
        assert self._sample(run, tmp_path / "a.jsonl", "molecule", "-n", "2", "--steps", "10", "--guidance", "1",
                            "--export-dir", str(tmp_path / "xyz")) == 0
        assert "decode_failures=0" in capsys.readouterr().out
        assert len(load_jsonl(tmp_path / "a.jsonl")) == 2
        assert len(list((tmp_path / "xyz").glob("*.xyz"))) == 2
        assert self._sample(run, tmp_path / "b.jsonl", "molecule", "-n", "2", "--steps", "10") == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_crystal_only_periodic(self, run, tmp_path):
        assert self._sample(run, tmp_path / "c.jsonl", "crystal", "-n", "6", "--n-atoms", "4") == 0
        recs = load_jsonl(tmp_path / "c.jsonl")
        manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
        assert len(recs) + manifest["decode_failures"] == 6
        assert all(r.system.periodic and r.class_label == 1 for r in recs)

    def test_eval_fixtures(self, tmp_path):
        crystals = synthetic_corpus(0, 5, seed=4)
        (tmp_path / "ok.jsonl").write_text(dumps_jsonl(crystals))
        assert main(["eval", str(tmp_path / "ok.jsonl"), "--out-dir", str(tmp_path / "r1")]) == 0
        report = json.loads((tmp_path / "r1" / "report.json").read_text())
        assert report["rates"]["overall_valid"] == 1.0

        bad = crystals[0].system
        frac = bad.frac_coords.copy()
        frac[1] = frac[0] + 0.01
        crystals[0] = type(crystals[0])("overlap", AtomicSystem.crystal(bad.atom_types, frac, bad.lattice), 1)
        (tmp_path / "bad.jsonl").write_text(dumps_jsonl(crystals))
        assert main(["eval", str(tmp_path / "bad.jsonl"), "--out-dir", str(tmp_path / "r2")]) == 0
        report = json.loads((tmp_path / "r2" / "report.json").read_text())
        assert report["rates"]["structural_valid"] == pytest.approx(4 / 5)
        lines = [json.loads(l) for l in (tmp_path / "r2" / "per_sample.jsonl").read_text().splitlines()]
        assert [l["structural_valid"] for l in lines] == [False, True, True, True, True]
        assert report["structural_valid"] == sum(l["structural_valid"] for l in lines)

    def test_eval_with_originals(self, tmp_path):
        (tmp_path / "c.jsonl").write_text(dumps_jsonl(synthetic_corpus(3, 3, seed=5)))
        assert main(["eval", str(tmp_path / "c.jsonl"), "--originals", str(tmp_path / "c.jsonl"),
                     "--reference", str(tmp_path / "c.jsonl"), "--out-dir", str(tmp_path / "r")]) == 0
        rates = json.loads((tmp_path / "r" / "report.json").read_text())["rates"]
        assert rates["match"] == 1.0 and rates["novel"] == 0.0


class TestExportLatents:
    def test_rows_and_columns(self, run, tmp_path):
        one = load_jsonl(run / "corpus.jsonl")[:1]
        (tmp_path / "one.jsonl").write_text(dumps_jsonl(one))
        out = tmp_path / "lat.csv"
        assert main(["export-latents", "--vae", str(run / "vae" / "vae_ckpt"), "--data", str(tmp_path / "one.jsonl"),
                     "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["id", "atom_index", "element", "class", "z1", "z2", "z3", "z4"]
        assert len(rows) - 1 == one[0].system.num_atoms
        assert all(len(r) == 4 + 4 for r in rows)
        first = out.read_bytes()
        assert main(["export-latents", "--vae", str(run / "vae" / "vae_ckpt"), "--data", str(tmp_path / "one.jsonl"),
                     "--out", str(out)]) == 0
        assert out.read_bytes() == first


class TestRerun:
    def test_outputs_reproduced_bitwise(self, run, tmp_path):
        out = tmp_path / "s.jsonl"
        assert main(["sample", "--config", str(run / "tiny.yaml"), "--dit", str(run / "dit" / "dit_ckpt"),
                     "--class", "molecule", "-n", "3", "--out", str(out)]) == 0
        first = out.read_bytes()
        out.unlink()
        assert main(["rerun", str(tmp_path / "s.jsonl.manifest.json")]) == 0
        assert out.read_bytes() == first

    def test_training_rerun(self, run, tmp_path):
        shutil.copytree(run / "vae", tmp_path / "vae")
        manifest = json.loads((run / "vae" / "run_manifest.json").read_text())
        assert main(["rerun", str(run / "vae" / "run_manifest.json")]) == 0
        for f in (tmp_path / "vae" / "vae_ckpt" / "params").iterdir():
            assert f.read_bytes() == (run / "vae" / "vae_ckpt" / "params" / f.name).read_bytes()
        assert manifest["params"]["out_dir"] == str(run / "vae")

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert main(["rerun", str(tmp_path / "m.json")]) == 2
