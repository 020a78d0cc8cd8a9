import json

import pytest

from flatsomatic import data
from flatsomatic.cli import main


@pytest.fixture
def small_synth(tmp_path):
    muts, labels = tmp_path / "muts.tsv", tmp_path / "labels.tsv"
    code = main(["synth", "--out-mutations", str(muts), "--out-labels", str(labels),
                 "--n-samples", "256", "--n-features", "512", "--signature-size", "50", "--seed", "3"])
    assert code == 0
    mat = tmp_path / "m.fsmx"
    assert main(["build-matrix", "--input", str(muts), "--min-freq", "1", "--out", str(mat)]) == 0
    return tmp_path, mat, labels


def _fixture_tsv(path):
    path.write_text("sample_id\tchromosome\tposition\tvaf\n"
                    "s1\t1\t100\t0.5\ns1\t2\t200\t0.3\n"
                    "s2\t1\t100\t0.4\ns2\t3\t300\t0.2\n"
                    "s3\tX\t50\t0.1\n")
    return path


def test_build_matrix_min_freq(tmp_path, capsys):
    out = tmp_path / "m.fsmx"
    assert main(["build-matrix", "--input", str(_fixture_tsv(tmp_path / "in.tsv")),
                 "--min-freq", "2", "--out", str(out)]) == 0
    m = data.load_matrix(out)
    assert m.n_features == 1 and m.vocabulary == ("1:100",)
    assert "m=1" in capsys.readouterr().out


def test_build_matrix_byte_identical(tmp_path):
    src = _fixture_tsv(tmp_path / "in.tsv")
    for name in ("a.fsmx", "b.fsmx"):
        assert main(["build-matrix", "--input", str(src), "--min-freq", "1", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.fsmx").read_bytes() == (tmp_path / "b.fsmx").read_bytes()


def test_build_matrix_writes_manifest(tmp_path):
    src = _fixture_tsv(tmp_path / "in.tsv")
    out = tmp_path / "m.fsmx"
    main(["build-matrix", "--input", str(src), "--min-freq", "1", "--out", str(out)])
    manifest = json.loads((tmp_path / "m.fsmx.manifest.json").read_text())
    assert manifest["command"] == "build-matrix"
    assert list(manifest["inputs"]) == [str(src)] and len(manifest["inputs"][str(src)]) == 64
    assert manifest["outputs"] == [str(out)]


def test_missing_input_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["build-matrix", "--input", str(missing), "--out", str(tmp_path / "m")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "m").exists()


def test_parse_error_exit_2_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("sample_id\tchromosome\tposition\tvaf\ns1\t1\tabc\t0.5\n")
    assert main(["build-matrix", "--input", str(bad), "--out", str(tmp_path / "m")]) == 2
    err = capsys.readouterr().err
    assert str(bad) in err and "2" in err


def test_empty_vocabulary_exit_3(tmp_path):
    src = _fixture_tsv(tmp_path / "in.tsv")
    assert main(["build-matrix", "--input", str(src), "--min-freq", "9", "--out", str(tmp_path / "m")]) == 3
    assert not (tmp_path / "m").exists()


def test_train_history_and_determinism(small_synth, capsys):
    tmp, mat, _ = small_synth
    args = ["train", "--matrix", str(mat), "--latent-dim", "8", "--epochs", "20",
            "--encoder-units", "32", "16", "--batch-size", "64", "--beta-max", "1", "--warmup-epochs", "5"]
    assert main(args + ["--out", str(tmp / "a.fsom"), "--history", str(tmp / "h.jsonl")]) == 0
    assert main(args + ["--out", str(tmp / "b.fsom")]) == 0
    assert (tmp / "a.fsom").read_bytes() == (tmp / "b.fsom").read_bytes()
    recs = [json.loads(line) for line in (tmp / "h.jsonl").read_text().splitlines()]
    assert len(recs) == 20
    betas = [r["beta"] for r in recs]
    assert betas == sorted(betas)
    manifest = json.loads((tmp / "a.fsom.manifest.json").read_text())
    assert manifest["config"]["vae"]["latent_dim"] == 8 and manifest["config"]["seed"] == 42


def test_train_holdout_prints_validation(small_synth, capsys):
    tmp, mat, _ = small_synth
    capsys.readouterr()
    assert main(["train", "--matrix", str(mat), "--latent-dim", "2", "--epochs", "2", "--encoder-units", "8", "8",
                 "--batch-size", "32", "--holdout", "0.25", "--out", str(tmp / "c.fsom")]) == 0
    assert "val_f1=" in capsys.readouterr().out


def test_train_batch_size_one_exit_4(small_synth, capsys):
    tmp, mat, _ = small_synth
    assert main(["train", "--matrix", str(mat), "--batch-size", "1", "--out", str(tmp / "x.fsom")]) == 4
    assert "batch norm" in capsys.readouterr().err
    assert not (tmp / "x.fsom").exists()


def test_config_file_lists_every_problem(small_synth, capsys):
    tmp, mat, _ = small_synth
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps({"vae": {"latent_dim": 0, "epochs": 0}, "folds": 1}))
    assert main(["train", "--matrix", str(mat), "--config", str(cfg), "--out", str(tmp / "x.fsom")]) == 4
    err = capsys.readouterr().err
    assert "latent_dim" in err and "epochs" in err and "folds" in err


def test_embed_shape_mismatch_exit_5(small_synth, tmp_path):
    tmp, mat, _ = small_synth
    assert main(["train", "--matrix", str(mat), "--latent-dim", "2", "--epochs", "1", "--encoder-units", "4", "4",
                 "--batch-size", "64", "--out", str(tmp / "m.fsom")]) == 0
    other = tmp / "other.fsmx"
    main(["build-matrix", "--input", str(_fixture_tsv(tmp / "in.tsv")), "--min-freq", "1", "--out", str(other)])
    assert main(["embed", "--checkpoint", str(tmp / "m.fsom"), "--matrix", str(other),
                 "--out", str(tmp / "z.tsv")]) == 5


def test_pca_header_and_cluster(small_synth):
    tmp, mat, labels = small_synth
    out = tmp / "pca.tsv"
    assert main(["pca", "--matrix", str(mat), "--dims", "2", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0].split("\t") == ["sample_id", "z0", "z1"]
    report = tmp / "nmi.json"
    assert main(["cluster", "--embeddings", str(out), "--labels", str(labels), "--k", "8",
                 "--out", str(report)]) == 0
    values = json.loads(report.read_text())
    assert 0.0 <= values["nmi_vae"] <= 1.0


def test_cluster_k_above_n_exit_5(tmp_path):
    emb, lab = tmp_path / "z.tsv", tmp_path / "l.tsv"
    emb.write_text("sample_id\tz0\n" + "".join(f"s{i}\t{i}\n" for i in range(10)))
    lab.write_text("sample_id\tlabel\n" + "".join(f"s{i}\t{i % 2}\n" for i in range(10)))
    assert main(["cluster", "--embeddings", str(emb), "--labels", str(lab), "--k", "32",
                 "--out", str(tmp_path / "r.json")]) == 5


def test_classify_both_sources(small_synth):
    tmp, mat, _ = small_synth
    resp_muts, resp = tmp / "m2.tsv", tmp / "resp.tsv"
    main(["synth", "--out-mutations", str(resp_muts), "--out-labels", str(tmp / "l2.tsv"),
          "--out-response", str(resp), "--n-samples", "256", "--n-features", "512",
          "--signature-size", "50", "--seed", "3"])
    out = tmp / "cls.json"
    assert main(["classify", "--matrix", str(mat), "--labels", str(resp), "--out", str(out)]) == 0
    assert 0.0 <= json.loads(out.read_text())["f1"] <= 1.0
    assert main(["classify", "--labels", str(resp), "--out", str(out)]) == 4


def test_synth_is_byte_identical(tmp_path):
    outs = []
    for tag in "ab":
        m, l = tmp_path / f"{tag}.tsv", tmp_path / f"{tag}.labels"
        main(["synth", "--out-mutations", str(m), "--out-labels", str(l), "--n-samples", "50",
              "--n-features", "100", "--signature-size", "5"])
        outs.append((m.read_bytes(), l.read_bytes()))
    assert outs[0] == outs[1]
