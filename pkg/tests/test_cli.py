import json

import numpy as np
import pytest

from nssl import cli
from nssl import dataio as D
from nssl import trainer as T
from nssl.errors import ConfigError

TINY = ["--synthetic", "24", "--encoder", "toy", "--batch-size", "8", "--epochs", "1"]


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_flops_vits8(tmp_path, capsys):
    assert cli.run(["flops", "--preset", "vits8", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    g = float(out.split(":")[1].split()[0])
    assert 0.35 <= g <= 0.65
    assert (tmp_path / "flops.tsv").exists()


def test_unknown_flag_exit_1(tmp_path, capsys):
    assert cli.run(["flops", "--presett", "vits8", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "--preset" in err


def test_unknown_subcommand_exit_1(capsys):
    assert cli.run(["fly"]) == 1


def test_config_defaults_from_empty_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert cli.config_resolve(T.TrainConfig, cli.load_config_file(p), {}, env={}) == T.TrainConfig()


def test_flag_overrides_file():
    cfg = cli.config_resolve(T.TrainConfig, {"epochs": 3, "base_lr": 0.5}, {"epochs": 7}, env={})
    assert cfg.epochs == 7 and cfg.base_lr == 0.5


def test_env_seed_is_a_default_override():
    assert cli.config_resolve(T.TrainConfig, {}, {}, env={"NSSL_SEED": "11"}).seed == 11
    assert cli.config_resolve(T.TrainConfig, {"seed": 4}, {}, env={"NSSL_SEED": "11"}).seed == 4
    assert cli.config_resolve(T.TrainConfig, {"seed": 4}, {"seed": 9}, env={"NSSL_SEED": "11"}).seed == 9


def test_unknown_key_nearest_suggestion():
    with pytest.raises(ConfigError) as exc:
        cli.config_resolve(T.TrainConfig, {"lr_scheduel": "cosine"}, {}, env={})
    msg = str(exc.value)
    keys = [f for f in T.TrainConfig.__dataclass_fields__]
    nearest = min(keys, key=lambda k: levenshtein("lr_scheduel", k))
    assert f"did you mean {nearest!r}" in msg


def test_type_mismatch_names_key():
    with pytest.raises(ConfigError, match="'epochs' expects int"):
        cli.config_resolve(T.TrainConfig, {"epochs": "ten"}, {}, env={})


def test_train_twice_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.run(["train", *TINY, "--steps", "2", "--seed", "7", "--out", str(out)]) == 0
        outs.append(out)
    for f in ("train.log", "checkpoint.nssl", "encoder.nssl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    man = json.loads((outs[0] / "run_manifest.json").read_text())
    assert man["seed"] == 7 and man["exit_code"] == 0 and man["config"]["train"]["epochs"] == 1
    assert len((outs[0] / "train.log").read_text().splitlines()) == 2


def test_manifest_config_reproduces_run(tmp_path):
    out = tmp_path / "a"
    cli.run(["train", *TINY, "--steps", "2", "--lr", "0.002", "--out", str(out)])
    man = json.loads((out / "run_manifest.json").read_text())
    cfg_file = tmp_path / "resolved.yaml"
    cfg_file.write_text(json.dumps(man["config"]["train"]))
    out2 = tmp_path / "b"
    assert cli.run(["train", "--config", str(cfg_file), "--synthetic", "24", "--steps", "2",
                    "--out", str(out2)]) == 0
    assert (out / "checkpoint.nssl").read_bytes() == (out2 / "checkpoint.nssl").read_bytes()


def test_embed_probe_pipeline(tmp_path):
    tr, em, pr = tmp_path / "t", tmp_path / "e", tmp_path / "p"
    assert cli.run(["train", *TINY, "--steps", "1", "--out", str(tr)]) == 0
    assert cli.run(["embed", "--model", str(tr / "encoder.nssl"), "--synthetic", "24", "--out", str(em)]) == 0
    emb = D.read_embeddings(em / "embeddings.lemb")
    assert emb.data.shape == (24, 32)
    assert cli.run(["probe", "--embeddings", str(em / "embeddings.lemb"), "--labels", str(em / "labels.csv"),
                    "--folds", "3", "--out", str(pr)]) == 0
    assert (pr / "probe_cls.tsv").read_text().startswith("fold\t")


def test_probe_missing_class_exit_1(tmp_path, capsys):
    ids = [f"c{i}" for i in range(12)]
    D.write_embeddings(tmp_path / "e.lemb", D.Embeddings(ids, np.random.default_rng(0).normal(size=(12, 4))))
    labels = ["a"] * 6 + ["b"] * 5 + ["rare"]
    D.write_labels(tmp_path / "l.csv", D.LabelTable(ids, labels))
    code = cli.run(["probe", "--task", "cls", "--folds", "5", "--embeddings", str(tmp_path / "e.lemb"),
                    "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "rare" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
    assert man["exit_code"] == 1 and "rare" in man["error"]


def test_nonfinite_loss_exit_2(tmp_path, capsys):
    code = cli.run(["train", *TINY, "--lr", "1e30", "--warmup", "0", "--steps", "3",
                    "--out", str(tmp_path / "o")])
    assert code == 2
    assert "NonFiniteLoss" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_1(tmp_path):
    ck = tmp_path / "ck.nssl"
    cfg = T.TrainConfig(preset="mocov3", encoder="toy", batch_size=8, epochs=1)
    st = T.init_train_state(cfg, 3)
    st.student.params["projector.0.w"].data[:] = np.nan
    T.checkpoint_save(st, ck)
    assert cli.run(["train", *TINY, "--resume", str(ck), "--out", str(tmp_path / "o")]) == 1


def test_robustness_and_curate(tmp_path):
    tr = tmp_path / "t"
    cli.run(["train", *TINY, "--steps", "1", "--out", str(tr)])
    rob = tmp_path / "r"
    assert cli.run(["robustness", "--model", str(tr / "checkpoint.nssl"), "--synthetic", "24", "--shifts", "2",
                    "--k", "5", "--pca-dim", "8", "--out", str(rob)]) == 0
    lines = (rob / "shift_report.tsv").read_text().splitlines()
    assert lines[0] == "reference\trmse\tcosine\toverlap" and len(lines) == 5
    ids = [f"slide{i}" for i in range(9)]
    x = np.repeat(np.eye(3) * 10, 3, axis=0) + np.random.default_rng(0).normal(scale=0.1, size=(9, 3))
    D.write_embeddings(tmp_path / "s.lemb", D.Embeddings(ids, x))
    assert cli.run(["curate", "--embeddings", str(tmp_path / "s.lemb"), "--k", "3",
                    "--out", str(tmp_path / "c")]) == 0
    chosen = (tmp_path / "c" / "whitelist.txt").read_text().split()
    assert sorted(int(c[5:]) // 3 for c in chosen) == [0, 1, 2]


def test_analyze_morans(tmp_path):
    r = np.random.default_rng(0)
    n = 60
    ids = [f"c{i}" for i in range(n)]
    grp = np.arange(n) % 2
    emb = np.where(grp[:, None] == 1, 5.0, -5.0) * np.array([1.0, 0.0]) + r.normal(scale=0.1, size=(n, 2))
    D.write_embeddings(tmp_path / "e.lemb", D.Embeddings(ids, emb))
    counts = np.stack([grp * 20 + r.integers(0, 2, n), r.integers(0, 30, n)], axis=1)
    D.write_gene_counts(tmp_path / "g.csv", D.GeneCounts(ids, ["MARK", "NOISE"], counts))
    assert cli.run(["analyze", "--embeddings", str(tmp_path / "e.lemb"), "--counts", str(tmp_path / "g.csv"),
                    "--k", "5", "--normalize", "log1p", "--out", str(tmp_path / "a")]) == 0
    rows = dict(line.split("\t")[:2] for line in (tmp_path / "a" / "morans_i.tsv").read_text().splitlines()
                if not line.startswith("#") and not line.startswith("gene"))
    assert float(rows["MARK"]) > 0.9 and abs(float(rows["NOISE"])) < 0.3


def test_manifest_data_round_trip(tmp_path):
    from PIL import Image
    img = (np.random.default_rng(0).uniform(size=(100, 100, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "img.png")
    (tmp_path / "m.csv").write_text("cell_id,image_path,centroid_x,centroid_y,slide_id,organ,label\n"
                                    + "\n".join(f"c{i},img.png,{40 + i},{45 + i % 3},s1,lung,{'ab'[i % 2]}"
                                                for i in range(10)) + "\nedge,img.png,3,3,s1,lung,a\n")
    enc = tmp_path / "t"
    cli.run(["flops", "--out", str(tmp_path / "f")])
    cli.run(["train", *TINY, "--steps", "1", "--out", str(enc)])
    out = tmp_path / "e"
    assert cli.run(["embed", "--model", str(enc / "encoder.nssl"), "--data", str(tmp_path / "m.csv"),
                    "--out", str(out)]) == 0
    assert D.read_embeddings(out / "embeddings.lemb").ids == [f"c{i}" for i in range(10)]
    assert "edge\t" in (out / "excluded.tsv").read_text()
    man = json.loads((out / "run_manifest.json").read_text())
    assert str(tmp_path / "m.csv") in man["inputs"]
