import numpy as np
import pytest

from tdrc import io
from tdrc.cli import main
from tdrc.evaluation import rank_for_disease, split_cv_type, training_tensor
from tdrc.solvers import predict_scores

# three rank-1 blocks with disjoint supports: an exactly rank-3 binary tensor
BLOCKS = [(range(0, 3), range(0, 2), 0), (range(3, 6), range(2, 4), 1), (range(6, 8), range(4, 6), 2)]
TYPES = ["genetics", "epigenetics", "target"]
TREES = {"d0": "C01.1", "d1": "C01.2", "d2": "C02", "d3": "C02.5", "d4": "C03.1.4", "d5": "C03.1.4.7"}


@pytest.fixture
def toy(tmp_path):
    rows = [f"mir-{i}\td{j}\t{TYPES[k]}" for ms, ds, k in BLOCKS for i in ms for j in ds]
    trip = tmp_path / "triplets.tsv"
    trip.write_text("miRNA\tdisease\ttype\n" + "\n".join(rows) + "\n")
    dag = tmp_path / "dag.tsv"
    dag.write_text("".join(f"{d}\t{t}\n" for d, t in TREES.items()) + "root\tC01\n")
    return tmp_path, trip, dag


def run(*argv):
    return main([str(a) for a in argv])


def test_sim_writes_valid_matrices_and_is_deterministic(toy):
    root, trip, dag = toy
    assert run("sim", "--triplets", trip, "--dag", dag, "--out", root / "a") == 0
    assert run("sim", "--triplets", trip, "--dag", dag, "--out", root / "b") == 0
    for name in ("mirna_similarity.tsv", "disease_similarity.tsv", "stats.tsv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()
    S_m = io.load_similarity(root / "a" / "mirna_similarity.tsv")
    S_n = io.load_similarity(root / "a" / "disease_similarity.tsv")
    assert len(S_m) == 8 and len(S_n) == 6
    for S in (S_m, S_n):
        S.check()
    # d0 and d1 are siblings under root: 2*0.5 / (1.5 + 1.5)
    assert S_n.values[0, 1] == pytest.approx(1 / 3, abs=1e-12)


def test_sim_missing_dag_exit_2(toy, capsys):
    root, trip, _ = toy
    missing = root / "nope.tsv"
    assert run("sim", "--triplets", trip, "--dag", missing, "--out", root / "o") == 2
    assert str(missing) in capsys.readouterr().err


def test_stats(toy, capsys):
    _, trip, _ = toy
    assert run("stats", "--triplets", trip) == 0
    out = capsys.readouterr().out
    assert "mirnas\t8" in out and "triplets\t16" in out


def _history_residual(path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return float(lines[-1].split("\t")[header.index("residual")])


def test_fit_zero_weights_matches_cp(toy):
    root, trip, dag = toy
    common = ["--triplets", trip, "--rank", 3, "--tol", 1e-10, "--max-iter", 500, "--seed", 1]
    # a low penalty cap keeps the proximal term from freezing the factors before the fit is exact
    assert run("fit", *common, "--dag", dag, "--alpha", 0, "--beta", 0, "--rho-cap", 10,
               "--out", root / "tdrc") == 0
    assert run("fit", *common, "--method", "cp", "--out", root / "cp") == 0
    r_tdrc = _history_residual(root / "tdrc" / "history.tsv")
    r_cp = _history_residual(root / "cp" / "history.tsv")
    assert abs(r_tdrc - r_cp) < 1e-4
    fs, M1, M2, meta = io.load_model(root / "tdrc" / "model.tdrc")
    assert fs.dims == (8, 6, 3) and meta["method"] == "tdrc"
    assert io.load_model(root / "cp" / "model.tdrc")[1] is None


def test_fit_same_seed_identical_model(toy):
    root, trip, dag = toy
    for name in ("a", "b"):
        assert run("fit", "--triplets", trip, "--dag", dag, "--seed", 5, "--max-iter", 20, "--out", root / name) == 0
    assert (root / "a" / "model.tdrc").read_bytes() == (root / "b" / "model.tdrc").read_bytes()
    assert (root / "a" / "history.tsv").read_bytes() == (root / "b" / "history.tsv").read_bytes()


def test_fit_invalid_rank_exit_2(toy, capsys):
    root, trip, dag = toy
    assert run("fit", "--triplets", trip, "--dag", dag, "--rank", 0, "--out", root / "o") == 2
    assert "r" in capsys.readouterr().err
    assert not (root / "o" / "model.tdrc").exists()


def test_fit_without_similarities_exit_2(toy):
    root, trip, _ = toy
    assert run("fit", "--triplets", trip, "--out", root / "o") == 2


def test_fit_divergence_exit_3(toy, capsys):
    root, trip, dag = toy
    assert run("sim", "--triplets", trip, "--dag", dag, "--out", root / "s") == 0
    S = io.load_similarity(root / "s" / "mirna_similarity.tsv")
    io.save_similarity(io.SimilarityMatrix(S.labels, S.values * 1e300), root / "huge.tsv")
    code = run("fit", "--triplets", trip, "--sim-m", root / "huge.tsv",
               "--sim-n", root / "s" / "disease_similarity.tsv", "--alpha", 1e10, "--out", root / "o")
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_cv_type_reports_three_metrics(toy, capsys):
    root, trip, dag = toy
    code = run("cv", "--triplets", trip, "--dag", dag, "--protocol", "type", "--folds", 4,
               "--max-iter", 30, "--out", root / "cv")
    assert code == 0
    lines = (root / "cv" / "cv_type.tsv").read_text().splitlines()
    assert lines[0] == "fold\tprecision\trecall\tf1"
    assert len(lines) == 1 + 4 + 1 and lines[-1].startswith("mean\t")
    assert "precision" in capsys.readouterr().out


def test_cv_triplet_pooled_and_parallel(toy):
    root, trip, dag = toy
    base = ["cv", "--triplets", trip, "--dag", dag, "--protocol", "triplet", "--folds", 3,
            "--max-iter", 20, "--pooled"]
    assert run(*base, "--out", root / "a") == 0
    assert run(*base, "--jobs", 2, "--out", root / "b") == 0
    a = (root / "a" / "cv_triplet.tsv").read_text()
    assert a == (root / "b" / "cv_triplet.tsv").read_text()
    assert a.splitlines()[0] == "fold\taupr\tauc\tf1"
    assert a.splitlines()[-1].startswith("pooled\t")


def test_cv_rejects_single_fold(toy):
    root, trip, dag = toy
    assert run("cv", "--triplets", trip, "--dag", dag, "--folds", 1, "--out", root / "o") == 2


def test_cv_fold_masking_on_cli_dataset(toy):
    _, trip, _ = toy
    ds = io.load_triplets(trip)
    plan = split_cv_type(ds, 4, seed=0)
    for f in range(4):
        x = training_tensor(ds, plan, f)
        for i, j in plan.test_items(f):
            assert not x[i, j].any()


def _fit_model(root, trip, dag):
    assert run("fit", "--triplets", trip, "--dag", dag, "--max-iter", 30, "--out", root / "m") == 0
    return root / "m" / "model.tdrc"


def test_predict_excludes_known_and_matches_ranker(toy):
    root, trip, dag = toy
    model = _fit_model(root, trip, dag)
    assert run("predict", "--triplets", trip, "--model", model, "--disease", "D1",
               "--top-n", 5, "--out", root / "p") == 0
    lines = (root / "p" / "predictions.tsv").read_text().splitlines()
    assert lines[0] == "disease_id\trank\tmirna_id\ttype_id\tscore"
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 5
    known = {line for line in trip.read_text().splitlines()[1:]}
    assert not any(f"{m}\t{d}\t{t}" in known for d, _, m, t, _ in rows)

    ds = io.load_triplets(trip)
    fs = io.load_model(model)[0]
    expected = rank_for_disease(predict_scores(fs), 1, ds.triplets, 5)
    assert [(r[2], r[3], r[4]) for r in rows] == [
        (ds.mirna_vocab[i], ds.type_vocab[k], f"{s:.6f}") for i, k, s in expected
    ]
    assert [int(r[1]) for r in rows] == [1, 2, 3, 4, 5]


def test_predict_all_diseases(toy):
    root, trip, dag = toy
    model = _fit_model(root, trip, dag)
    assert run("predict", "--triplets", trip, "--model", model, "--all", "--out", root / "p") == 0
    rows = (root / "p" / "predictions.tsv").read_text().splitlines()[1:]
    # 8 miRNAs x 3 types minus known per disease, capped at 20
    assert len(rows) == 6 * 20


def test_predict_unknown_disease_exit_2(toy, capsys):
    root, trip, dag = toy
    model = _fit_model(root, trip, dag)
    assert run("predict", "--triplets", trip, "--model", model, "--disease", "zzz", "--out", root / "p") == 2
    assert "zzz" in capsys.readouterr().err


def test_config_file_with_flag_override(toy):
    root, trip, dag = toy
    cfg = root / "run.cfg"
    cfg.write_text(f"# toy config\ntriplets = {trip}\ndag = {dag}\nrank = 2\nmax-iter = 7\n")
    assert run("fit", "--config", cfg, "--max-iter", 3, "--out", root / "o") == 0
    _, _, _, meta = io.load_model(root / "o" / "model.tdrc")
    assert meta["r"] == 2 and meta["max_iter"] == 3


def test_config_unknown_key(toy):
    root, trip, _ = toy
    cfg = root / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert run("stats", "--triplets", trip, "--config", cfg) == 2


def test_missing_subcommand():
    assert main([]) == 2
