import pytest

from marginrepair import SynthConfig, generate
from marginrepair.errors import GenerationError
from marginrepair.gsn import mean_sensitivity
from marginrepair.model import gap


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(seed=1, n_repair=0)
    with pytest.raises(ValueError):
        SynthConfig(seed=1, d_in=1)
    with pytest.raises(ValueError):
        SynthConfig(seed=1, n_classes=1)
    with pytest.raises(ValueError):
        SynthConfig(seed=1, activation="gelu")


def test_seed33_definitional_properties(seed33_problem):
    prob = seed33_problem
    assert len(prob.repair_set) == 5
    assert len(prob.remain_set) == 20
    assert len(prob.eval_set) == 50
    for s in prob.repair_set:
        assert gap(prob.model, s.v, s.label) < 0.0
    for s in prob.remain_set:
        assert gap(prob.model, s.v, s.label) > 0.0


def test_saturated_tanh_has_low_sensitivity():
    prob = generate(SynthConfig(seed=61, activation="tanh", saturation_bias=5.0))
    assert mean_sensitivity(prob.model, prob.aux_set, 2) < 0.1


def test_bit_identical_regeneration():
    cfg = SynthConfig(seed=44, n_repair=3, n_remain=10, n_eval=12, n_aux=4)
    a = generate(cfg)
    b = generate(cfg)
    assert a.model.W.tobytes() == b.model.W.tobytes()
    assert a.model.b.tobytes() == b.model.b.tobytes()
    for sa, sb in zip(
        a.repair_set + a.remain_set + a.eval_set + a.aux_set,
        b.repair_set + b.remain_set + b.eval_set + b.aux_set,
    ):
        assert sa.id == sb.id and sa.label == sb.label
        assert sa.v.tobytes() == sb.v.tobytes()


def test_ids_pairwise_disjoint(seed33_problem):
    prob = seed33_problem
    groups = [prob.repair_set, prob.remain_set, prob.eval_set, prob.aux_set]
    all_ids = [s.id for g in groups for s in g]
    assert len(set(all_ids)) == len(all_ids)


def test_requested_sizes_respected():
    prob = generate(SynthConfig(seed=7, n_repair=2, n_remain=6, n_eval=9, n_aux=3))
    assert (len(prob.repair_set), len(prob.remain_set)) == (2, 6)
    assert (len(prob.eval_set), len(prob.aux_set)) == (9, 3)


def test_remain_may_be_empty():
    prob = generate(SynthConfig(seed=8, n_repair=2, n_remain=0, n_eval=4, n_aux=2))
    assert prob.remain_set == []


def test_generation_failure_suggests_larger_perturbation():
    # heavily overlapping 8-class clusters: clean accuracy ~1/8, so the
    # correctly-classified pool can never reach the requested remain size
    cfg = SynthConfig(
        seed=5, d_in=4, d_out=4, n_classes=8, cluster_separation=0.01,
        n_repair=2, n_remain=30, n_eval=4, n_aux=2,
    )
    with pytest.raises(GenerationError, match="perturbation"):
        generate(cfg)
