import csv
import io
import json
import math

import numpy as np
import pytest

from vlretrieval import encoder as enc
from vlretrieval.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from vlretrieval.index import HCIndex
from vlretrieval.querynorm import normalize, qid

SHOP = [
    (1, "red dress long", "Acme", "Dresses"),
    (2, "red dress short", "Nike", "Dresses"),
    (3, "running shoes red", "Nike", "Shoes"),
    (4, "running shoes blue", "Adidas", "Shoes"),
    (5, "court shoes white", "Nike", "Shoes"),
    (6, "blue shirt cotton", "Puma", "Shirts"),
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_shop(tmp_path, rows=SHOP):
    rng = np.random.default_rng(0)
    cat = tmp_path / "shop.jsonl"
    with open(cat, "w") as fh:
        for pid, title, brand, category in rows:
            rec = {"id": pid, "title": title, "brand": brand, "category": category,
                   "patches": rng.normal(size=(16, 8)).round(4).tolist()}
            fh.write(json.dumps(rec) + "\n")
    pairs = tmp_path / "pairs.jsonl"
    with open(pairs, "w") as fh:
        for pid, title, _, _ in rows:
            fh.write(json.dumps({"query": " ".join(title.split()[:2]), "product_id": pid}) + "\n")
    return cat, pairs


@pytest.fixture
def shop(tmp_path, capsys):
    cat, pairs = write_shop(tmp_path)
    ckpt, index = tmp_path / "m.ckpt", tmp_path / "m.hci"
    assert run(capsys, "train", "--catalog", cat, "--pairs", pairs, "--steps", 20, "--out", ckpt)[0] == EXIT_OK
    assert run(capsys, "build-index", "--checkpoint", ckpt, "--catalog", cat, "--out", index, "--lists", 2)[0] == EXIT_OK
    return {"catalog": cat, "checkpoint": ckpt, "index": index, "dir": tmp_path}


def query(capsys, shop, *extra):
    return run(capsys, "query", "--checkpoint", shop["checkpoint"], "--catalog", shop["catalog"],
               "--index", shop["index"], "--nprobe", 2, *extra)


def parse_listing(text):
    lines = text.strip().splitlines()
    head, rows = lines[0].split("\t"), [line.split("\t") for line in lines[1:]]
    return int(head[1]), [(int(r), int(p), float(s)) for r, p, s in rows]


def test_train_synthetic_writes_files(tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    code, stdout, _ = run(capsys, "train", "--synthetic", "2x8", "--steps", 5, "--out", out)
    assert code == EXIT_OK and "5 steps" in stdout
    assert out.read_bytes()[:4] == b"MMR1"
    rows = list(csv.DictReader(io.StringIO((tmp_path / "m.ckpt.log.csv").read_text())))
    assert len(rows) == 5 and list(rows[0]) == ["step", "lr", "loss_qpm", "loss_mpm", "N1", "N2"]
    assert (tmp_path / "m.ckpt.catalog.jsonl").exists() and (tmp_path / "m.ckpt.cases.jsonl").exists()


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    code, _, err = run(capsys, "train", "--synthetic", "2x8", "--config", missing, "--out", tmp_path / "m.ckpt")
    assert code != EXIT_OK
    assert str(missing) in err


def test_zero_steps_is_init(tmp_path, capsys):
    out = tmp_path / "m.ckpt"
    assert run(capsys, "train", "--synthetic", "2x8", "--steps", 0, "--seed", 3, "--out", out)[0] == EXIT_OK
    params, _ = enc.load_checkpoint(out)
    init = enc.init_params(params.vocab_size, seed=3)
    for (name, a), (_, b) in zip(init.blocks(), params.blocks()):
        assert np.array_equal(a.astype(np.float32), b), name


def test_config_file_applies(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("dim = 16\nsteps = 2\n")
    out = tmp_path / "m.ckpt"
    assert run(capsys, "train", "--synthetic", "2x8", "--config", cfg, "--out", out)[0] == EXIT_OK
    assert enc.load_checkpoint(out)[0].dim == 16


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == EXIT_USAGE
    capsys.readouterr()
    assert run(capsys, "train", "--out", tmp_path / "x")[0] == EXIT_USAGE  # no data source


def test_one_product_corpus(tmp_path, capsys):
    cat, pairs = write_shop(tmp_path, SHOP[:1])
    ckpt, index = tmp_path / "one.ckpt", tmp_path / "one.hci"
    assert run(capsys, "train", "--catalog", cat, "--pairs", pairs, "--steps", 3, "--out", ckpt)[0] == EXIT_OK
    assert run(capsys, "build-index", "--checkpoint", ckpt, "--catalog", cat, "--out", index)[0] == EXIT_OK
    assert HCIndex.load(index).n_lists == 1
    code, out, _ = run(capsys, "query", "--checkpoint", ckpt, "--catalog", cat, "--index", index, "red", "dress")
    assert code == EXIT_OK
    assert parse_listing(out)[1][0][:2] == (1, 1)


def test_rebuild_is_byte_identical(shop, capsys):
    again = shop["dir"] / "again.hci"
    run(capsys, "build-index", "--checkpoint", shop["checkpoint"], "--catalog", shop["catalog"], "--out", again, "--lists", 2)
    assert again.read_bytes() == shop["index"].read_bytes()
    assert (shop["dir"] / "again.hci.emb").read_bytes() == (shop["dir"] / "m.hci.emb").read_bytes()


def test_vocab_mismatch(shop, tmp_path, capsys):
    (tmp_path / "other").mkdir()
    other, _ = write_shop(tmp_path / "other", [(9, "green hat", "X", "Hats")])
    code, _, err = run(capsys, "build-index", "--checkpoint", shop["checkpoint"], "--catalog", other, "--out", tmp_path / "z")
    assert code == EXIT_RUNTIME and "vocabulary" in err


def test_word_order_does_not_matter(shop, capsys):
    a = query(capsys, shop, "dress", "red")
    b = query(capsys, shop, "red", "dress")
    assert a[0] == b[0] == EXIT_OK
    assert a[1] == b[1]
    assert parse_listing(a[1])[0] == qid(normalize("red dress"))


def test_filter_restricts_results(shop, capsys):
    code, out, _ = query(capsys, shop, "--filter", "Brand:Nike AND Category:Shoes", "--k", 5, "running", "shoes")
    assert code == EXIT_OK
    hits = [pid for _, pid, _ in parse_listing(out)[1]]
    assert hits and set(hits) <= {3, 5}


def test_query_listing_sorted(shop, capsys):
    _, out, _ = query(capsys, shop, "--k", 6, "shoes")
    rows = parse_listing(out)[1]
    assert [r for r, _, _ in rows] == list(range(1, len(rows) + 1))
    assert [s for _, _, s in rows] == sorted((s for _, _, s in rows), reverse=True)


def test_empty_query_is_usage_error(shop, capsys):
    assert query(capsys, shop, "  ")[0] == EXIT_USAGE


def test_bad_filter_is_usage_error(shop, capsys):
    code, _, err = query(capsys, shop, "--filter", "Brand Nike", "shoes")
    assert code == EXIT_USAGE and "token 1" in err


def test_oov_tokens_dropped(shop, capsys):
    code, out, _ = query(capsys, shop, "red", "dress", "zzz")
    assert code == EXIT_OK
    assert parse_listing(out)[0] == qid(normalize("red dress zzz"))


def test_hash_query(capsys):
    code, out, _ = run(capsys, "hash-query", "dress", "red")
    assert code == EXIT_OK and int(out) == qid(["dress", "red"])


def eval_cmd(capsys, shop, cases, *extra):
    return run(capsys, "eval", "--checkpoint", shop["checkpoint"], "--catalog", shop["catalog"], "--index", shop["index"],
               "--nprobe", 2, "--cases", cases, *extra)


def test_eval_report(shop, capsys):
    cases = shop["dir"] / "cases.jsonl"
    cases.write_text("\n".join(json.dumps({"query": t, "targets": [p]}) for p, t, _, _ in SHOP) + "\n")
    report = shop["dir"] / "report.csv"
    code, out, _ = eval_cmd(capsys, shop, cases, "--k", 6, "--out", report)
    assert code == EXIT_OK and report.read_text() == out
    rows = {r["metric"]: r for r in csv.DictReader(io.StringIO(out))}
    assert set(rows) == {"Recall@6", "P_rel", "P_cate"}
    assert float(rows["Recall@6"]["value"]) == 1.0  # K covers the whole corpus


def test_eval_empty_cases(shop, capsys):
    cases = shop["dir"] / "empty.jsonl"
    cases.write_text("")
    assert eval_cmd(capsys, shop, cases)[0] == EXIT_RUNTIME


def _recall(capsys, tmp_path, steps):
    d = tmp_path / f"s{steps}"
    d.mkdir()
    ckpt = d / "m.ckpt"
    run(capsys, "train", "--synthetic", "8x64", "--steps", steps, "--out", ckpt)
    cat = d / "m.ckpt.catalog.jsonl"
    run(capsys, "build-index", "--checkpoint", ckpt, "--catalog", cat, "--out", d / "m.hci", "--lists", 1)
    _, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--catalog", cat, "--index", d / "m.hci",
                    "--cases", d / "m.ckpt.cases.jsonl", "--k", 10)
    row = next(r for r in csv.DictReader(io.StringIO(out)) if r["metric"] == "Recall@10")
    return float(row["value"]), int(row["n_cases"])


def test_random_checkpoint_near_chance_and_training_beats_it(tmp_path, capsys):
    random_recall, n = _recall(capsys, tmp_path, 0)
    chance = 10 / 512  # one target per case, K=10, N=512
    sigma = math.sqrt(chance * (1 - chance) / n)
    assert abs(random_recall - chance) < 4 * sigma
    trained, _ = _recall(capsys, tmp_path, 600)
    assert trained > random_recall
