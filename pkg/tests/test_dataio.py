import numpy as np
import pytest

from pmors.dataio import (DataInputError, InteractionLog, World, WorldConfig, build_dataset, coverage_report,
                          generate_world, ingest_csv, label_from_watch_ratio, simulate_logs, split_by_time,
                          write_csv)
from pmors.forgetting import NEGATIVE, NEUTRAL, POSITIVE, TimeWindows
from pmors.metrics import EvalProtocol
from pmors.trainer import evaluate_params
from pmors.ranker import RankerParams


def tiny(**kw):
    base = dict(num_users=40, num_items=300,
                num_clusters={"material_fp": 10, "item_fp": 30, "industry": 4}, seed=3)
    base.update(kw)
    return WorldConfig(**base)


# --- world -----------------------------------------------------------------

def test_same_seed_same_world():
    a, _ = generate_world(tiny())
    b, _ = generate_world(tiny())
    assert a.to_dict() == b.to_dict()
    c, _ = generate_world(tiny(seed=4))
    assert c.to_dict() != a.to_dict()


@pytest.mark.parametrize("kw", [dict(latent_dim=0), dict(num_items=0), dict(num_users=0),
                                dict(bait_fraction=1.5), dict(slip_bait=1.0),
                                dict(num_clusters={"material_fp": 2})])
def test_world_config_rejections(kw):
    with pytest.raises(DataInputError):
        tiny(**kw)


def test_world_round_trip(tmp_path):
    world, teacher = generate_world(tiny())
    world.save(tmp_path / "w.json")
    loaded = World.load(tmp_path / "w.json")
    assert loaded.to_dict() == world.to_dict()
    users, items = np.array([0, 5, 9]), np.array([1, 2, 299])
    assert np.array_equal(generate_world(loaded.config)[1](users, items), teacher(users, items))


def test_teacher_is_frozen():
    world, teacher = generate_world(tiny())
    before = teacher(np.arange(5), np.arange(5))
    world.item_bias += 10.0
    assert np.array_equal(teacher(np.arange(5), np.arange(5)), before)


def test_slip_propensity_without_drift_is_constant():
    world, _ = generate_world(tiny(slip_base=0.3, slip_bait=0.3, slip_segment_noise=0.0, drift_amplitude=0.0))
    p = world.slip_probability(np.arange(40), np.arange(40), np.full(40, 1_700_000_000 + 86400 * 9))
    assert np.allclose(p, 0.3, atol=1e-12)


def test_simulated_slip_rate_matches_propensity():
    world, teacher = generate_world(tiny(slip_base=0.3, slip_bait=0.3, slip_segment_noise=0.0,
                                         drift_amplitude=0.0))
    log = simulate_logs(world, teacher, 10_000, EvalProtocol(20, 10, 1), seed=1)
    assert abs(np.mean(log.label == NEGATIVE) - 0.3) <= 0.03


def test_extreme_propensities():
    for p, expect in ((1e-12, 0.0), (1 - 1e-12, 1.0)):
        world, teacher = generate_world(tiny(slip_base=p, slip_bait=p, slip_segment_noise=0.0,
                                             drift_amplitude=0.0))
        log = simulate_logs(world, teacher, 500, EvalProtocol(20, 10, 1), seed=2)
        assert np.mean(log.label == NEGATIVE) == expect


def test_bait_clusters_slip_more():
    world, teacher = generate_world(tiny(num_items=2000, bait_fraction=0.3))
    base = world.slip_propensity
    assert base.max() > 0.5 > np.median(base)


def test_simulate_is_seeded_and_time_ordered():
    world, teacher = generate_world(tiny())
    a = simulate_logs(world, teacher, 200)
    b = simulate_logs(world, teacher, 200)
    assert np.array_equal(a.item_id, b.item_id) and np.array_equal(a.watch_ratio, b.watch_ratio)
    assert np.all(np.diff(a.timestamp) > 0)
    assert len(simulate_logs(world, teacher, 0)) == 0


def test_simulated_labels_agree_with_thresholds():
    world, teacher = generate_world(tiny())
    log = simulate_logs(world, teacher, 500)
    assert np.array_equal(log.label, label_from_watch_ratio(log.watch_ratio))


# --- ingest ----------------------------------------------------------------

def test_label_thresholds():
    assert label_from_watch_ratio([2.5, 0.0, 0.3, 1.0, 2.0]).tolist() == [
        POSITIVE, NEGATIVE, NEUTRAL, NEUTRAL, POSITIVE]


def test_csv_round_trip(tmp_path):
    world, teacher = generate_world(tiny())
    log = simulate_logs(world, teacher, 300)
    write_csv(log, tmp_path / "log.csv")
    back, rep = ingest_csv(tmp_path / "log.csv")
    assert rep.rows_read == rep.rows_kept == 300 and rep.rows_skipped == 0
    for name in ("user_id", "item_id", "timestamp", "watch_ratio", "label"):
        assert np.array_equal(getattr(back, name), getattr(log, name))
    assert set(back.dims) == set(log.dims)


def test_ingest_header_only(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("user_id,item_id,timestamp,watch_ratio\n")
    log, rep = ingest_csv(path)
    assert len(log) == 0 and rep.rows_read == 0


def test_ingest_skips_malformed_rows(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("user_id,item_id,timestamp,watch_ratio\n"
                    "1,2,100,0.5\n"
                    "x,2,100,0.5\n"
                    "1,2\n"
                    "1,2,100,-1\n"
                    "3,4,200,2.5\n")
    log, rep = ingest_csv(path)
    assert rep.rows_read == 5 and rep.rows_kept == 2 and rep.skipped_lines == [3, 4, 5]
    assert log.label.tolist() == [NEUTRAL, POSITIVE]


def test_ingest_missing_columns(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("user_id,item_id,watch_ratio\n1,2,0.5\n")
    with pytest.raises(DataInputError, match="timestamp"):
        ingest_csv(path)
    empty = tmp_path / "none.csv"
    empty.write_text("")
    with pytest.raises(DataInputError):
        ingest_csv(empty)


# --- split -----------------------------------------------------------------

def _log(n, ts=None):
    ts = np.arange(n) if ts is None else np.asarray(ts)
    z = np.zeros(n, dtype=np.int64)
    return InteractionLog(np.arange(n), z, ts, np.ones(n), np.full(n, NEUTRAL, dtype=object))


def test_split_sizes():
    tr, va, te = split_by_time(_log(100))
    assert (len(tr), len(va), len(te)) == (90, 5, 5)
    assert tr.timestamp.max() < va.timestamp.min() <= va.timestamp.max() < te.timestamp.min()


def test_split_rejects_zero_fraction():
    with pytest.raises(DataInputError):
        split_by_time(_log(100), (0.95, 0.05, 0.0))
    with pytest.raises(DataInputError):
        split_by_time(_log(2))


def test_split_ignores_row_order():
    n = 60
    perm = np.random.default_rng(0).permutation(n)
    log = _log(n).take(perm)
    a = split_by_time(_log(n))
    b = split_by_time(log)
    for x, y in zip(a, b):
        assert np.array_equal(x.user_id, y.user_id)


# --- coverage --------------------------------------------------------------

def _dim_log(users, ts, fp):
    n = len(users)
    return InteractionLog(np.asarray(users), np.asarray(fp), np.asarray(ts), np.zeros(n),
                          np.full(n, NEGATIVE, dtype=object),
                          {"item_fp": np.asarray(fp), "material_fp": np.asarray(fp)})


def test_single_user_coverage_is_equal():
    log = _dim_log([0] * 6, [0, 10, 20, 1000, 5000, 90000], [0, 0, 1, 1, 0, 2])
    rows = coverage_report(log, TimeWindows.parse())
    by = {(r["granularity"], r["method"]): r for r in rows}
    assert by[("item_fp", "personalized")] == {**by[("item_fp", "general")], "method": "personalized"}


def test_unique_items_have_no_personal_history():
    log = _dim_log([0, 1, 2, 0, 1], [0, 5, 10, 15, 20], [0, 1, 2, 3, 4])
    rows = coverage_report(log, TimeWindows.parse(), ("item_fp",))
    assert all(v == 0.0 for r in rows for k, v in r.items() if k.startswith("w"))


def test_general_covers_at_least_personalized():
    world, teacher = generate_world(tiny())
    log = simulate_logs(world, teacher, 2000)
    rows = coverage_report(log, TimeWindows.parse())
    for gran in ("item_fp", "material_fp"):
        p = next(r for r in rows if r["granularity"] == gran and r["method"] == "personalized")
        g = next(r for r in rows if r["granularity"] == gran and r["method"] == "general")
        for k in ("w0", "w1", "w2", "w3"):
            assert g[k] >= p[k]
        assert p["w0"] <= p["w1"] <= p["w2"] <= p["w3"]


def test_coverage_rejects_empty_and_unknown():
    with pytest.raises(DataInputError):
        coverage_report(_log(0), TimeWindows.parse())
    with pytest.raises(DataInputError):
        coverage_report(_log(3), TimeWindows.parse(), ("industry",))


# --- dataset ---------------------------------------------------------------

def test_dataset_shapes_and_anchoring():
    world, teacher = generate_world(tiny())
    log = simulate_logs(world, teacher, 400)
    ds = build_dataset(world, teacher, log, seed=1)
    assert ds.train.items.shape == (360, 10)
    assert ds.test.items.shape == (20, 100)
    assert np.array_equal(ds.train.items[:, 0], ds.log.take(np.argsort(log.timestamp, kind="stable")[:360]).item_id)
    for row in ds.test.items:
        assert len(set(row.tolist())) == 100


def test_head_candidates_keep_teacher_favourites():
    world, teacher = generate_world(tiny())
    log = simulate_logs(world, teacher, 100)
    ds = build_dataset(world, teacher, log, head_candidates=3, seed=1)
    q = ds.train.teacher_scores
    # the two extra head items beat every random filler
    assert np.all(q[:, 1:3].min(axis=1) >= q[:, 3:].max(axis=1))


def test_single_item_world_gives_perfect_metrics():
    world, teacher = generate_world(tiny(num_items=1))
    log = simulate_logs(world, teacher, 60)
    ds = build_dataset(world, teacher, log)
    assert ds.protocol == EvalProtocol(1, 1, 1)
    params = RankerParams.init(world.ranker_config(), 0)
    rep = evaluate_params(params, ds)
    assert rep.ndcg_at_10 == 1.0 and rep.recall_10_1 == 1.0
