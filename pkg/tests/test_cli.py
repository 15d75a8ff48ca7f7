import csv
import json
import math

import pytest

from sytta.cli import ConfigError, load_run_config, main, read_config_file, resolve_config
from sytta.lm import LmConfig, ModelState, save_checkpoint


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "tiny.bin"
    save_checkpoint(ModelState.create(LmConfig(n_layers=1, d_model=16, n_heads=2, max_context=128, rank=2), 0), path)
    return path


def base_args(ckpt, *extra):
    return ["--set", f"checkpoint={ckpt}", "--set", "domain.size=4", "--set", "adapt.max_new_tokens=6",
            "--set", "adapt.batch_size=2", *extra]


def test_config_file_sections_and_bare_keys(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("seed = 3\nout_dir = here\n\n[adapt]\nk = 8\nmode = dynamic_ref\n\n[adapt.diw]\nbeta = 0.5\n"
                 "\n[domain]\nnames = agri, med\nlexicon_shift = 0.5\n")
    raw = read_config_file(p)
    assert raw["adapt.k"] == 8 and raw["domain.names"] == "agri, med"
    cfg = load_run_config(p, ["adapt.k=2", "adapt.gate.threshold=2.0"])
    assert cfg.adapt.k == 2 and cfg.adapt.mode == "dynamic_ref" and cfg.adapt.diw.beta == 0.5
    assert cfg.adapt.gate.threshold == 2.0 and cfg.adapt.seed == 3
    assert [d.name for d in cfg.domains] == ["agri", "med"] and cfg.domains[0].lexicon_shift == 0.5
    assert cfg.out_dir == "here"


@pytest.mark.parametrize("values,field", [({"adapt.kk": 1}, "adapt.kk"), ({"adapt.k": 0}, "adapt"),
                                          ({"bogus": 1}, "bogus"), ({"domain.name": "mars"}, "domain"),
                                          ({"adapt.diw.beta": 2}, "adapt.diw"),
                                          ({"strategies": "tent,tent"}, "strategies")])
def test_malformed_config_names_the_field(values, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        resolve_config(values)


def test_exit_code_on_config_error(tmp_path, capsys):
    assert main(["adapt", "--set", "adapt.k=0", "--out", str(tmp_path)]) == 2
    assert "adapt" in capsys.readouterr().err
    assert main(["adapt", "--set", "checkpoint=/nonexistent.bin", "--out", str(tmp_path)]) == 2


def test_gen_corpus(tmp_path):
    assert main(["gen-corpus", "--set", "domain.names=agri,geo", "--set", "domain.size=3", "--out", str(tmp_path)]) == 0
    qs = tmp_path / "geo-s0.questions.jsonl"
    assert qs.exists() and all("a" not in json.loads(l) for l in qs.read_text().splitlines())
    assert len((tmp_path / "agri-s0.qa.jsonl").read_text().splitlines()) == 3


def test_adapt_outputs_and_determinism(tmp_path, ckpt):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["adapt", *base_args(ckpt), "--out", str(a)]) == 0
    assert main(["adapt", *base_args(ckpt), "--out", str(b)]) == 0
    rep = a / "agri-s0.report.json"
    assert rep.read_bytes() == (b / "agri-s0.report.json").read_bytes()
    d = json.loads(rep.read_text())
    assert d["run_config"]["adapt"]["k"] == 4 and d["passes"]["adapted"] == 4
    assert (a / "agri-s0.runlog.jsonl").exists() and (a / "agri-s0.diw.csv").exists()


def test_adapt_none_reproduces_base_bytes(tmp_path, ckpt):
    for d in ("x", "y"):
        assert main(["adapt", *base_args(ckpt, "--set", "adapt.strategy=none"), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "agri-s0.report.json").read_bytes() == (tmp_path / "y" / "agri-s0.report.json").read_bytes()


def test_adapt_from_embedded_config_reproduces(tmp_path, ckpt):
    first = tmp_path / "first"
    main(["adapt", *base_args(ckpt), "--set", "adapt.k=2", "--out", str(first)])
    emb = json.loads((first / "agri-s0.report.json").read_text())["run_config"]
    flat = []
    for sec in ("adapt",):
        for k, v in emb[sec].items():
            if not isinstance(v, dict):
                flat += ["--set", f"{sec}.{k}={json.dumps(v)}"]
    flat += ["--set", f"checkpoint={emb['checkpoint']}", "--set", f"domain.size={emb['domains'][0]['size']}"]
    second = tmp_path / "second"
    main(["adapt", *flat, "--out", str(second)])
    one = json.loads((first / "agri-s0.report.json").read_text())
    two = json.loads((second / "agri-s0.report.json").read_text())
    assert one == two


def test_adapt_on_question_file(tmp_path, ckpt):
    main(["gen-corpus", "--set", "domain.size=2", "--out", str(tmp_path)])
    assert main(["adapt", *base_args(ckpt), "--cohort", str(tmp_path / "agri-s0.questions.jsonl"),
                 "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "agri-s0.questions.report.json").read_text())
    assert rep["rouge_lsum"] is None and len(rep["responses"]) == 2


def test_nan_exit_code(tmp_path):
    from sytta.lm import init_base_params
    cfg = LmConfig(n_layers=1, d_model=16, n_heads=2, max_context=128, rank=2)
    params = init_base_params(cfg, 0)
    params["head"][0, 0] = float("nan")
    path = tmp_path / "nan.bin"
    save_checkpoint(ModelState(cfg, params), path)
    assert main(["adapt", *base_args(path), "--out", str(tmp_path)]) == 3


def test_profile_entropy(tmp_path, ckpt):
    assert main(["profile-entropy", *base_args(ckpt, "--set", "max_pos=5"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "entropy_profile.csv").read_text().splitlines()
    assert lines[0].startswith("# checksum=")
    rows = list(csv.DictReader(l for l in lines if not l.startswith("#")))
    assert 1 <= len(rows) <= 5 and all(0 <= float(r["mean_entropy"]) <= math.log(259) for r in rows)


def test_compare_rows(tmp_path, ckpt):
    assert main(["compare", *base_args(ckpt, "--set", "adapt.k=2"), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "compare.csv").read_text().splitlines()
    rows = list(csv.DictReader(text[1:]))
    assert [r["strategy"] for r in rows] == ["base", "tent", "eata", "tlm", "sytta-static", "sytta-dynamic"]
    by = {r["strategy"]: r for r in rows}
    assert int(by["sytta-static"]["adapted_passes"]) == 4
    assert int(by["sytta-dynamic"]["adapted_passes"]) == 3 * 4
    assert int(by["tlm"]["adapted_passes"]) == 8
