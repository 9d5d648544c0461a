import json

import pytest

from cip.cli import main
from cip.edit_engine import AnchorScheme, EditConstraints, enumerate_anchor, enumerate_non_anchor
from cip.metrics import REPORT_SCHEMA
from oracles import brute_force_edits


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "1500", "--seed", "1", "--out", str(d / "d.tsv")]) == 0
    assert main(["split", "--data", str(d / "d.tsv"), "--protocol", "random", "--seed", "0",
                 "--out", str(d / "s.json")]) == 0
    return d


def _train(d, name, *flags):
    argv = ["train", "--data", str(d / "d.tsv"), "--split", str(d / "s.json"), "--epochs", "2",
            "--hidden-dim", "8", "--out", str(d / f"{name}.npz"), *flags]
    assert main(argv) == 0
    return json.loads((d / f"{name}.npz.manifest.json").read_text())


def _rows(text):
    lines = text.strip().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


class TestSynth:
    def test_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--n", "1000", "--seed", "1", "--out", str(tmp_path / f"{name}.tsv")]) == 0
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
        manifest = json.loads((tmp_path / "a.tsv.manifest.json").read_text())
        assert manifest["subcommand"] == "synth" and manifest["seeds"]

    def test_missing_out(self, capsys):
        assert main(["synth", "--n", "1000"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_bad_pos_rate(self, tmp_path):
        assert main(["synth", "--pos-rate", "0.7", "--out", str(tmp_path / "x.tsv")]) == 2

    def test_config_file_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 300, "seed": 4}))
        assert main(["synth", "--config", str(cfg), "--n", "200", "--out", str(tmp_path / "x.tsv")]) == 0
        m = json.loads((tmp_path / "x.tsv.manifest.json").read_text())
        assert m["config"]["n"] == 200 and m["config"]["seed"] == 4
        cfg.write_text(json.dumps({"bogus": 1}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "y.tsv")]) == 2

    def test_no_command(self):
        assert main([]) == 2


class TestSplit:
    def test_fho_lists_five_families(self, workdir):
        assert main(["split", "--data", str(workdir / "d.tsv"), "--protocol", "fho", "--out", str(workdir / "f.json")]) == 0
        ev = json.loads((workdir / "f.json").read_text())["evidence"]
        assert len(ev["withheld_families"]) == 5

    def test_da_threshold(self, workdir):
        assert main(["split", "--data", str(workdir / "d.tsv"), "--protocol", "da", "--threshold", "0.30",
                     "--out", str(workdir / "da.json")]) == 0
        ev = json.loads((workdir / "da.json").read_text())["evidence"]
        assert ev["test_min_distance"] and min(ev["test_min_distance"]) > 0.30

    def test_bad_protocol(self, workdir):
        assert main(["split", "--data", str(workdir / "d.tsv"), "--protocol", "bogus", "--out", str(workdir / "x.json")]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["split", "--data", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "x.json")]) == 1


class TestEdits:
    def test_anchor_k1(self, capsys):
        assert main(["edits", "--peptide", "GILGFVFTL", "--kind", "anchor", "--k", "1", "--enumerate"]) == 0
        rows = _rows(capsys.readouterr().out)
        assert rows and all(r["member"][1] != "I" or r["member"][8] != "L" for r in rows)
        assert {r["changed_positions"] for r in rows} <= {"2", "9"}
        assert len(rows) == len(enumerate_anchor("GILGFVFTL", c=EditConstraints(max_hamming=1)))

    def test_non_anchor_rows(self, capsys):
        assert main(["edits", "--peptide", "GILGFVFTL", "--kind", "non-anchor", "--enumerate"]) == 0
        rows = _rows(capsys.readouterr().out)
        assert all(r["member"][0] == "G" and r["member"][1] == "I" and r["member"][8] == "L" for r in rows)
        expected = brute_force_edits("GILGFVFTL", "non_anchor", AnchorScheme(), EditConstraints())
        assert {r["member"] for r in rows} == expected == set(enumerate_non_anchor("GILGFVFTL").members)
        assert set(rows[0]) == {"source", "kind", "member", "hamming", "changed_positions"}

    def test_sample(self, tmp_path):
        out = tmp_path / "e.tsv"
        assert main(["edits", "--peptide", "GILGFVFTL", "--kind", "anchor", "--sample", "5", "--seed", "2",
                     "--out", str(out)]) == 0
        assert len(_rows(out.read_text())) == 5
        assert (tmp_path / "e.tsv.manifest.json").exists()

    def test_invalid_peptide(self):
        assert main(["edits", "--peptide", "GILGFVXTL", "--kind", "anchor", "--enumerate"]) == 1

    def test_bad_k(self):
        assert main(["edits", "--peptide", "GILGFVFTL", "--kind", "anchor", "--k", "4", "--enumerate"]) == 2


class TestTrainEval:
    def test_cip_manifest_values(self, workdir):
        eff = _train(workdir, "cip", "--preset", "cip")["config"]["effective"]
        assert (eff["lambda1"], eff["lambda2"], eff["margin"], eff["k"]) == (0.4, 0.2, 0.3, 2)

    def test_no_sens_manifest(self, workdir):
        assert _train(workdir, "ns", "--ablation", "no_sens")["config"]["effective"]["lambda2"] == 0

    def test_baseline_log(self, workdir):
        _train(workdir, "base", "--preset", "baseline")
        log = [json.loads(x) for x in (workdir / "base.npz.log.jsonl").read_text().splitlines()]
        assert log and all(e["inv"] == 0 and e["sens"] == 0 for e in log)

    def test_eval_schema_and_reproducible(self, workdir, capsys):
        if not (workdir / "cip.npz").exists():
            _train(workdir, "cip", "--preset", "cip")
        jsonschema = pytest.importorskip("jsonschema")
        outs = []
        for name in ("m1", "m2"):
            assert main(["eval", "--model", str(workdir / "cip.npz"), "--data", str(workdir / "d.tsv"),
                         "--split", str(workdir / "s.json"), "--seed", "0", "--out", str(workdir / f"{name}.json")]) == 0
            outs.append((workdir / f"{name}.json").read_bytes())
        assert outs[0] == outs[1]
        report = json.loads(outs[0])
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["edits_per_pair"] == 3
        assert (workdir / "m1.tsv").exists()
        assert "auroc" in capsys.readouterr().out

    def test_eval_missing_model(self, workdir):
        assert main(["eval", "--model", str(workdir / "none.npz"), "--data", str(workdir / "d.tsv"),
                     "--out", str(workdir / "x.json")]) == 1

    def test_train_reproducible(self, workdir):
        _train(workdir, "r1", "--preset", "cip", "--seed", "3")
        _train(workdir, "r2", "--preset", "cip", "--seed", "3")
        assert (workdir / "r1.npz").read_bytes() == (workdir / "r2.npz").read_bytes()


def test_report(tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--seeds", "0", "--configs", "baseline,cip", "--n", "1500", "--epochs", "2",
                 "--out-dir", str(out)]) == 0
    for name in ("runs.tsv", "summary.tsv", "contrasts.json", "metrics.png", "curves.png", "manifest.json"):
        assert (out / name).stat().st_size > 0
    assert len((out / "runs.tsv").read_text().strip().splitlines()) == 3
    assert "si_reduction" in json.loads((out / "contrasts.json").read_text())["cip_vs_baseline"]
