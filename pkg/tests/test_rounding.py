import numpy as np
import pytest

from quantguard.errors import ContractError, DegenerateScaleError
from quantguard.quantize import make_config, quantize_nearest
from quantguard.rounding import flip_fraction, flip_fraction_graph, omse_search

RNG = np.random.default_rng(5)


def make_state(w, bits=8):
    cfg = make_config(np.asarray(w, np.float32), bits=bits)
    _, st = quantize_nearest(np.asarray(w, np.float32), cfg)
    return cfg, st


def test_flip_zero_fraction_is_identity():
    _, st = make_state(RNG.normal(size=(6, 6)))
    np.testing.assert_array_equal(flip_fraction(st, 0.0), st.r)


def test_flip_full_fraction_is_rbar():
    _, st = make_state(RNG.normal(size=(6, 6)))
    np.testing.assert_array_equal(flip_fraction(st, 1.0), st.r_bar)


def test_flip_argmax_example():
    _, st = make_state(np.array([1.0, 1.0, 1.0], np.float32))
    st.e = np.array([0.4, 0.1, 0.3])
    st.r = np.array([0, 0, 0], np.int8)
    got = flip_fraction(st, 1.0 / 3.0, "largest_error")
    np.testing.assert_array_equal(got, [1, 0, 0])
    got_min = flip_fraction(st, 1.0 / 3.0, "smallest_error")
    np.testing.assert_array_equal(got_min, [0, 1, 0])


def test_flip_tie_break_by_flat_index():
    _, st = make_state(np.array([1.0, 1.0, 1.0, 1.0], np.float32))
    st.e = np.zeros(4)
    st.r = np.zeros(4, np.int8)
    got = flip_fraction(st, 0.5, "largest_error")
    np.testing.assert_array_equal(got, [1, 1, 0, 0])


def test_flip_monotone_subset_property():
    _, st = make_state(RNG.normal(size=(12, 7)))
    for direction in ("largest_error", "smallest_error"):
        prev = set()
        for f in np.linspace(0, 1, 21):
            strat = flip_fraction(st, float(f), direction)
            flipped = set(np.flatnonzero((strat != st.r).reshape(-1)).tolist())
            assert prev <= flipped
            prev = flipped


def test_flip_graph_global_vs_per_layer():
    _, st1 = make_state(RNG.normal(size=(4, 4)))
    _, st2 = make_state(RNG.normal(size=(3, 3)) * 10)
    states = {0: st1, 2: st2}
    per_layer = flip_fraction_graph(states, 0.25, "largest_error", "per_layer")
    assert (per_layer[0] != st1.r).sum() == 4  # ceil(0.25*16)
    assert (per_layer[2] != st2.r).sum() == 3  # ceil(0.25*9)
    global_ = flip_fraction_graph(states, 0.25, "largest_error", "global")
    total_flips = (global_[0] != st1.r).sum() + (global_[2] != st2.r).sum()
    assert total_flips == int(np.ceil(0.25 * 25))
    # joint ranking: every flipped error must be >= every kept error
    flipped_e = np.concatenate(
        [st.e.reshape(-1)[(global_[i] != st.r).reshape(-1)] for i, st in states.items()]
    )
    kept_e = np.concatenate(
        [st.e.reshape(-1)[(global_[i] == st.r).reshape(-1)] for i, st in states.items()]
    )
    assert flipped_e.min() >= kept_e.max() - 1e-12


def test_flip_validates_inputs():
    _, st = make_state(RNG.normal(size=(2, 2)))
    with pytest.raises(ContractError):
        flip_fraction(st, 1.5)
    with pytest.raises(ContractError):
        flip_fraction(st, 0.5, "sideways")
    with pytest.raises(ContractError):
        flip_fraction_graph({0: st}, 0.5, scope="diagonal")


def test_omse_exact_representability():
    # integer multiples of 1/128 with the max element at 127/128: the maxabs
    # scale (= the grid's right endpoint) represents every entry exactly
    s0 = 1.0 / 128.0
    w = np.array([127 * s0, -64 * s0, 32 * s0], np.float32)
    cfg = omse_search(w, bits=8, grid_size=256)
    assert cfg.scale == pytest.approx(s0, rel=1e-12)
    w_q, _ = quantize_nearest(w, cfg)
    assert float(((w - w_q) ** 2).sum()) == 0.0


def test_omse_grid_two_returns_better_endpoint():
    w = RNG.normal(size=(30,)).astype(np.float32)
    cfg = omse_search(w, bits=4, grid_size=2)
    amax = float(np.abs(w.astype(np.float64)).max())
    endpoints = [amax / 28.0, amax / 7.0]
    mses = []
    from quantguard.quantize import QuantConfig

    for s in endpoints:
        c = QuantConfig(bits=4, scale=s, n=-8, p=7, scheme="omse")
        w_q, _ = quantize_nearest(w, c)
        mses.append(((w.astype(np.float64) - w_q) ** 2).sum())
    assert cfg.scale == pytest.approx(endpoints[int(np.argmin(mses))])


def test_omse_close_to_fine_grid_oracle():
    for seed in range(3):
        w = (np.random.default_rng(seed).normal(size=(200,)) * 2).astype(np.float32)
        coarse = omse_search(w, bits=4, grid_size=256)
        fine = omse_search(w, bits=4, grid_size=65536 // 16)  # 4096-point oracle

        def mse_at(cfg):
            w_q, _ = quantize_nearest(w, cfg)
            return float(((w.astype(np.float64) - w_q) ** 2).sum())

        assert mse_at(coarse) <= mse_at(fine) * 1.01


def test_omse_beats_maxabs_on_random_tensors():
    for seed in range(10):
        w = np.random.default_rng(seed).standard_t(df=3, size=100).astype(np.float32)
        if not np.abs(w).max():
            continue
        omse_cfg = omse_search(w, bits=4)
        maxabs_cfg = make_config(w, bits=4)

        def mse_at(cfg):
            w_q, _ = quantize_nearest(w, cfg)
            return float(((w.astype(np.float64) - w_q) ** 2).sum())

        assert mse_at(omse_cfg) <= mse_at(maxabs_cfg) + 1e-12


def test_omse_validates():
    with pytest.raises(DegenerateScaleError):
        omse_search(np.zeros(4, np.float32), bits=8)
    with pytest.raises(ContractError):
        omse_search(np.ones(4, np.float32), bits=8, grid_size=1)


def test_make_config_omse_scheme_delegates():
    w = RNG.normal(size=(50,)).astype(np.float32)
    via_make = make_config(w, bits=4, scheme="omse", grid_size=64)
    direct = omse_search(w, bits=4, grid_size=64)
    assert via_make == direct
