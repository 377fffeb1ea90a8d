import numpy as np
import pytest

from conftest import AGGREGATE_BLOCKS, GRID_CELL_COUNTS, GRID_N
from toolsense.labels import bucket_transition_matrix
from toolsense.synth import ScoreBlock, SynthConfig, block_fixture, synth_trace
from toolsense.traces import load_trace_set, validate

UNIFORM_MIX = ((0.1, 0.1, 0.1), (0.1, 0.2, 0.1), (0.1, 0.1, 0.1))


def test_diagonal_mix_gives_zero_gain_everywhere():
    cfg = SynthConfig(n=500, cell_mix=((0.2, 0, 0), (0, 0.5, 0), (0, 0, 0.3)),
                      with_embeddings=False)
    res = synth_trace(cfg, seed=0)
    for rec in res.trace_set.records:
        assert rec.s_always_tool == rec.s_no_tool


def test_same_seed_gives_byte_identical_files(tmp_path):
    cfg = SynthConfig(n=40, cell_mix=UNIFORM_MIX, embed_dim=6, n_layers=2,
                      self_noise=0.3, perceived_noise=0.2, unparsed_rate=0.1)
    a = synth_trace(cfg, seed=11).write_to_dir(tmp_path / "a")
    b = synth_trace(cfg, seed=11).write_to_dir(tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    cfg = SynthConfig(n=40, cell_mix=UNIFORM_MIX, with_embeddings=False)
    a = synth_trace(cfg, seed=1).write_to_dir(tmp_path / "a")
    b = synth_trace(cfg, seed=2).write_to_dir(tmp_path / "b")
    assert a.read_bytes() != b.read_bytes()


def test_engineered_grid_counts_are_recounted_exactly():
    # The generator places scores inside cells; the labeling module counts
    # them back independently.
    cfg = SynthConfig(n=GRID_N, cell_counts=GRID_CELL_COUNTS, with_embeddings=False)
    res = synth_trace(cfg, seed=5)
    matrix = bucket_transition_matrix(res.trace_set)
    assert (matrix.counts == np.asarray(GRID_CELL_COUNTS)).all()
    assert matrix.need_positive == 177
    assert matrix.need_total == 348


def test_infeasible_mix_rejected():
    bad = ((0.5, 0, 0), (0, 0.5, 0), (0, 0, 0.1))
    with pytest.raises(ValueError, match="sums to"):
        synth_trace(SynthConfig(n=10, cell_mix=bad), seed=0)


def test_cell_counts_must_sum_to_n():
    with pytest.raises(ValueError, match="sum"):
        synth_trace(SynthConfig(n=10, cell_counts=((1, 0, 0),) * 3), seed=0)


def test_emitted_set_passes_validate(tmp_path):
    cfg = SynthConfig(n=25, cell_mix=UNIFORM_MIX, embed_dim=4, n_layers=2,
                      self_noise=0.2, unparsed_rate=0.2)
    path = synth_trace(cfg, seed=2).write_to_dir(tmp_path)
    ts = load_trace_set(path)  # raises on any violation
    assert validate(ts) == []


def test_signal_layer_is_separated_and_noise_layers_are_not():
    cfg = SynthConfig(n=400, cell_mix=UNIFORM_MIX, embed_dim=8, n_layers=2,
                      signal_layer=1, margin=6.0)
    res = synth_trace(cfg, seed=4)
    x_sig = res.matrices[("no_tool_input", 1)].values.astype(np.float64)
    x_noise = res.matrices[("no_tool_input", 0)].values.astype(np.float64)
    need = res.need.astype(bool)
    gap_sig = x_sig[need, 0].mean() - x_sig[~need, 0].mean()
    gap_noise = abs(x_noise[need, 0].mean() - x_noise[~need, 0].mean())
    assert gap_sig == pytest.approx(6.0, abs=1.0)
    assert gap_noise < 1.0


def test_label_noise_flips_roughly_the_requested_fraction():
    cfg = SynthConfig(n=2000, cell_mix=UNIFORM_MIX, embed_dim=4, margin=10.0,
                      label_noise=0.25)
    res = synth_trace(cfg, seed=8)
    x = res.matrices[("no_tool_input", 0)].values
    side = x[:, 0] > 0
    mismatch = float(np.mean(side != res.need.astype(bool)))
    assert 0.18 < mismatch < 0.32


def test_block_fixture_aggregates():
    ts = block_fixture(AGGREGATE_BLOCKS, seed=7)
    s_nt = np.array([r.s_no_tool for r in ts.records])
    s_at = np.array([r.s_always_tool for r in ts.records])
    assert len(ts) == 500
    assert s_nt.mean() == pytest.approx(0.61, abs=1e-12)
    assert s_at.mean() == pytest.approx(0.78, abs=1e-12)
    assert np.maximum(s_nt, s_at).mean() == pytest.approx(0.83, abs=1e-12)
    assert sum(r.self_called for r in ts.records) == 152
    assert int(np.sum(s_at - s_nt > 0)) == 300


def test_block_fixture_rejects_bad_called_count():
    with pytest.raises(ValueError):
        block_fixture([ScoreBlock(count=2, s_no_tool=0.5, s_always_tool=0.5, called=3)])
