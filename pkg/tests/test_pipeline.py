import json

import numpy as np
import pytest

from seqgrasp.exec_planner import TrialOutcome
from seqgrasp.pipeline import (DATASET_FORMAT, DataError, ExperimentConfig, OutcomeRecord, atomic_write_text,
                               dataset_header, dumps_dataset, execute_trial, heatmap_stats, infer_assignment,
                               loads_dataset, object_cloud, read_dataset, run_trials, sampled_record,
                               write_dataset)


def outcome(pair, success, trial=0):
    return OutcomeRecord("SG", pair, trial, "r", TrialOutcome(success, None if success else "lift",
                                                              "none" if success else "wrench_infeasible"))


def test_roundtrip_all_kinds(hand, objects, small_dataset):
    recs = small_dataset["pinch"][:2] + small_dataset["merged"][:2] + [outcome(("sphere", "box"), False)]
    text = dumps_dataset(recs, dataset_header(hand, objects, {"k": 1}))
    header, back = loads_dataset(text, hand, objects)
    assert header["format"] == DATASET_FORMAT and header["meta"] == {"k": 1}
    assert [type(r) for r in back] == [type(r) for r in recs]
    assert dumps_dataset(back, header) == text
    # parse -> serialize -> parse is a fixed point
    assert dumps_dataset(loads_dataset(dumps_dataset(back, header))[1], header) == text


def test_hash_and_format_mismatch(hand, objects):
    text = dumps_dataset([outcome(("a", "b"), True)], dataset_header(hand, objects))
    h = json.loads(text.splitlines()[0])
    for key, val in (("hand", "0" * 16), ("objects", "0" * 16), ("format", "other/9")):
        bad = dict(h, **{key: val})
        with pytest.raises(DataError):
            loads_dataset("\n".join([json.dumps(bad)] + text.splitlines()[1:]), hand, objects)


def test_malformed_and_empty(tmp_path, hand, objects):
    with pytest.raises(DataError):
        loads_dataset("")
    header = json.dumps(dataset_header(hand, objects))
    with pytest.raises(DataError):
        loads_dataset(header + "\n{not json}\n")
    with pytest.raises(DataError):
        loads_dataset(header + '\n{"kind": "mystery"}\n')
    p = tmp_path / "empty.ndjson"
    write_dataset(p, [], hand, objects)
    with pytest.raises(DataError, match="no records"):
        read_dataset(p, hand, objects)
    assert read_dataset(p, hand, objects, allow_empty=True)[1] == []
    q = tmp_path / "mixed.ndjson"
    write_dataset(q, [outcome(("a", "b"), True)], hand, objects)
    with pytest.raises(DataError):
        read_dataset(q, hand, objects, kind="grasp")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "missing_dir" / "out.txt"
    with pytest.raises(OSError):
        atomic_write_text(target, "x")
    assert not target.exists()
    good = tmp_path / "out.txt"
    atomic_write_text(good, "a")
    atomic_write_text(good, "b")
    assert good.read_text() == "b"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_heatmap_rates():
    full = [outcome(("sphere", "cylinder"), True, i) for i in range(25)]
    some = [outcome(("cube", "cylinder"), i < 14, i) for i in range(25)]
    hm = heatmap_stats(full + some, ["sphere", "cube"], ["cylinder", "box"])
    assert hm.rates[0, 0] == 1.0 and hm.rates[1, 0] == 0.56
    assert np.isnan(hm.rates[0, 1]) and np.isnan(hm.rates[1, 1])
    assert hm.to_csv() == "pinch\\side,cylinder,box\nsphere,1.0000,n/a\ncube,0.5600,n/a\n"
    assert hm.mean_rate() == pytest.approx(0.78)


def test_experiment_config():
    cfg = ExperimentConfig()
    assert cfg.samples == 25 and cfg.position_noise == 0.01 and cfg.yaw_noise == 0.1
    assert cfg.rows == ["sphere", "cube"] and cfg.cols == ["cylinder", "box"]
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig(samples=0)
    with pytest.raises(ValueError):
        ExperimentConfig(mode="XX")
    with pytest.raises(ValueError):
        ExperimentConfig.from_json({"sample": 3})


def test_object_cloud_is_centered(objects):
    c = object_cloud(objects["cylinder"], 300)
    assert c.shape == (300, 3)
    np.testing.assert_array_equal(c, object_cloud(objects["cylinder"], 300))
    assert np.all(np.abs(c.mean(0)) < 0.01)


def test_sampled_record_recovers_source_assignment(hand, objects, small_dataset):
    m = small_dataset["merged"][0]
    r = sampled_record(hand, objects, m.object_ids, m.theta, m.T1, m.T2, "probe")
    assert hand.candidate_fingers(r.assignments[0]) <= {"thumb", "index", "middle"}
    assert hand.candidate_fingers(r.assignments[1]) <= {"ring", "palm"}
    assert r.clearance == pytest.approx(m.clearance)
    a = infer_assignment(hand, m.theta, m.T1, objects[m.object_ids[0]], "pinch")
    assert len(a) == len(hand.candidate_fingers(a))  # one candidate per finger


def test_sg_and_lg_share_execution(hand, objects, small_dataset):
    cfg = ExperimentConfig(pairs=[("sphere", "cylinder")], samples=3)
    pools = {("sphere", "cylinder"): small_dataset["merged"]}
    sg = run_trials(hand, objects, cfg, pools, "SG")
    lg = run_trials(hand, objects, cfg, pools, "LG")
    assert [o.outcome for o in sg] == [o.outcome for o in lg]
    assert {o.mode for o in sg} == {"SG"} and {o.mode for o in lg} == {"LG"}
    again = run_trials(hand, objects, cfg, pools, "SG")
    assert heatmap_stats(again).to_csv() == heatmap_stats(sg).to_csv()
    rec = pools[("sphere", "cylinder")][0]
    a = execute_trial(hand, rec, objects, np.random.default_rng(5), 0.01, 0.1)
    b = execute_trial(hand, rec, objects, np.random.default_rng(5), 0.01, 0.1)
    assert a == b


def test_missing_pair_leaves_cell_empty(hand, objects, small_dataset):
    cfg = ExperimentConfig(samples=2)
    pools = {("sphere", "cylinder"): small_dataset["merged"]}
    hm = heatmap_stats(run_trials(hand, objects, cfg, pools, "SG"), cfg.rows, cfg.cols)
    assert hm.trials[0, 0] == 2 and hm.trials.sum() == 2
    assert hm.to_csv().count("n/a") == 3
