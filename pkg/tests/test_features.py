import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtfsad.errors import ContractViolation, ValidationError
from mtfsad.features import (
    DEFAULT_SCHEMA, FFT_BINS, SWAP_PAIRS, FlowTable, extract, extract_matrix, fft_magnitudes,
    quantile, read_dataset_csv, summary_stats, write_dataset_csv, write_mask_csv)
from mtfsad.ingest import PacketSummary, TcpFlags as F, assemble_flows, read_capture
from mtfsad.synth import naive_dft

C, S = ("10.0.0.1", 1000), ("10.0.0.2", 80)


def pkt(t_us, from_client, flags=F.ACK, payload=0, ctrl=40):
    (a, pa), (b, pb) = (C, S) if from_client else (S, C)
    return PacketSummary(t_us // 1_000_000, t_us % 1_000_000, a, b, pa, pb,
                         20, ctrl - 20, payload, int(flags), 14 + ctrl + payload)


def flow_of(pkts):
    (f,) = assemble_flows(pkts)
    return f


def value(vec, name):
    return vec.values[DEFAULT_SCHEMA.position(DEFAULT_SCHEMA.by_name(name).feature_id)]


def is_defined(vec, name):
    return vec.defined[DEFAULT_SCHEMA.position(DEFAULT_SCHEMA.by_name(name).feature_id)]


# -- schema ----------------------------------------------------------------------

def test_schema_layout():
    ids = DEFAULT_SCHEMA.ids
    assert len(ids) == 60 and len(set(ids)) == 60
    assert ids[:10] == [1, 2, 3, 4, 5, 6, 7, 25, 26, 27]
    assert ids[10:20] == list(range(239, 249))
    assert ids[20:] == list(range(300, 340))
    assert DEFAULT_SCHEMA.columns[0] == "f1"
    assert DEFAULT_SCHEMA.subset([27, 1]).ids == [27, 1]


def test_schema_csv(tmp_path):
    p = tmp_path / "schema.csv"
    DEFAULT_SCHEMA.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "id,name,direction,definition" and len(lines) == 61


# -- statistics --------------------------------------------------------------------

def test_quantile_examples():
    assert quantile([1.0, 2.0, 3.0, 4.0], 0.25) == pytest.approx(1.75)
    assert quantile([1.0, 2.0, 3.0, 4.0], 0.5) == pytest.approx(2.5)
    assert quantile([5.0], 0.75) == 5.0
    with pytest.raises(ContractViolation):
        quantile([], 0.5)
    with pytest.raises(ValidationError):
        quantile([1.0], 1.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(0, 1))
def test_quantile_matches_numpy_linear(sample, q):
    assert quantile(sorted(sample), q) == pytest.approx(np.quantile(sample, q), rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_summary_stats_ordering(sample):
    s = summary_stats(sample)
    eps = 1e-9 * (1 + max(abs(x) for x in sample))
    assert s["min"] <= s["q1"] + eps <= s["median"] + 2 * eps <= s["q3"] + 3 * eps
    assert s["q3"] <= s["max"] + eps
    assert s["min"] - eps <= s["mean"] <= s["max"] + eps
    assert s["var"] >= 0


def test_summary_stats_empty():
    assert all(v is None for v in summary_stats([]).values())


# -- per-flow extraction -----------------------------------------------------------

def test_iat_example_from_timestamps():
    f = flow_of([pkt(0, True, F.SYN), pkt(1_000_000, False, F.SYN | F.ACK),
                 pkt(3_000_000, True), pkt(7_000_000, False)])
    v = extract(f)
    assert value(v, "iat_min") == 1.0
    assert value(v, "iat_q1") == 1.5
    assert value(v, "iat_median") == 2.0
    assert value(v, "iat_mean") == pytest.approx(7 / 3)
    assert value(v, "iat_q3") == 3.0
    assert value(v, "iat_max") == 4.0
    assert value(v, "iat_var") == pytest.approx(14 / 9)
    assert value(v, "duration") == 7.0
    assert value(v, "iat_min_c2s") == 3.0 and value(v, "iat_min_s2c") == 6.0


def test_single_packet_flow_marks_iats_undefined():
    v = extract(flow_of([pkt(0, True, F.SYN)]))
    for name in ("iat_min", "iat_mean", "iat_var", "fft_iat_1", "iat_max_c2s", "len_min_s2c"):
        assert not is_defined(v, name) and value(v, name) == 0.0
    assert value(v, "ctrl_median") == 40.0 and is_defined(v, "ctrl_median")
    assert value(v, "len_min_c2s") == 54.0
    assert value(v, "duration") == 0.0
    assert value(v, "server_port") == 80.0 and value(v, "client_port") == 1000.0


def test_handshake_flag_counts():
    v = extract(flow_of([pkt(0, True, F.SYN), pkt(10, False, F.SYN | F.ACK), pkt(20, True),
                         pkt(30, True, F.PSH | F.ACK, 100)]))
    assert value(v, "syn_count_c2s") == 1 and value(v, "syn_count_s2c") == 1
    assert value(v, "ack_count_c2s") == 2 and value(v, "ack_count_s2c") == 1
    assert value(v, "payload_bytes_c2s") == 100 and value(v, "payload_bytes_s2c") == 0


def test_handcrafted_session_by_hand(data_path):
    f = assemble_flows(read_capture(data_path("handcrafted.pcap")))[0]
    v = extract(f)
    # gaps of 10, 10, 10, 30, 40, 10, 90, 10, 10 ms
    assert value(v, "iat_min") == pytest.approx(0.01)
    assert value(v, "iat_q1") == pytest.approx(0.01)
    assert value(v, "iat_median") == pytest.approx(0.01)
    assert value(v, "iat_mean") == pytest.approx(0.22 / 9)
    assert value(v, "iat_q3") == pytest.approx(0.03)
    assert value(v, "iat_max") == pytest.approx(0.09)
    # two 44-byte handshake headers (MSS option), eight 40-byte ones
    assert value(v, "ctrl_q1") == 40.0
    assert value(v, "ctrl_median") == 40.0
    assert value(v, "ctrl_mean") == pytest.approx(40.8)
    assert value(v, "ctrl_max") == 44.0
    assert value(v, "ctrl_var") == pytest.approx(2.56)
    assert value(v, "payload_bytes_s2c") == 2000 and value(v, "payload_bytes_c2s") == 120


# -- spectrum ------------------------------------------------------------------------

def test_fft_constant_sequence():
    mags = fft_magnitudes([0.5] * 32)
    assert mags.shape == (FFT_BINS,)
    np.testing.assert_allclose(mags, 0.0, atol=1e-12)


def test_fft_alternating_sequence():
    np.testing.assert_allclose(fft_magnitudes([1.0, -1.0] * 16), 0.0, atol=1e-12)
    # period 2 lands on bin 16, outside the reported bins; period 4 lands on bin 8
    mags = fft_magnitudes([1.0, 0.0, -1.0, 0.0] * 8)
    expected = np.zeros(FFT_BINS)
    expected[7] = 16.0
    np.testing.assert_allclose(mags, expected, atol=1e-12)


def test_fft_frozen_random_sequence():
    iats = [0.25, 0.95, 0.19, 0.18, 0.35, 0.23, 0.67, 0.12, 0.9, 0.86, 0.003, 0.54]
    # from the direct O(N^2) transform of the zero-padded sequence
    frozen = [4.095097034332409, 1.5458391394775175, 1.1600385219590859, 1.8335998249157914,
              1.2053007001537934, 0.548126434606251, 0.839322353145429, 1.3585908140422553,
              1.5500657246749698, 0.8421646091348054]
    np.testing.assert_allclose(fft_magnitudes(iats), frozen, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40))
def test_fft_matches_naive_dft(iats):
    seq = (list(iats) + [0.0] * 32)[:32]
    ref = np.abs(naive_dft(seq))[1:FFT_BINS + 1]
    np.testing.assert_allclose(fft_magnitudes(iats), ref, atol=1e-9)


# -- invariances --------------------------------------------------------------------

events = st.lists(st.tuples(st.integers(1, 5_000_000), st.booleans(),
                            st.integers(0, 1400), st.sampled_from([40, 44, 52])),
                  min_size=1, max_size=25)


def flow_from_events(evs, shift=0):
    t = 10_000_000 + shift
    pkts = [pkt(t, True, F.SYN, 0, 44)]
    for gap, direction, payload, ctrl in evs:
        t += gap
        pkts.append(pkt(t, direction, F.ACK, payload, ctrl))
    return flow_of(pkts)


@settings(max_examples=60, deadline=None)
@given(events, st.integers(0, 10**9))
def test_time_shift_invariance(evs, shift):
    a, b = extract(flow_from_events(evs)), extract(flow_from_events(evs, shift))
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.defined, b.defined)


@settings(max_examples=60, deadline=None)
@given(events)
def test_role_swap_exchanges_direction_pairs(evs):
    f = flow_from_events(evs)
    a, b = extract(f), extract(f.swapped())
    pos = DEFAULT_SCHEMA.position
    swapped = set()
    for i, j in SWAP_PAIRS:
        assert a.values[pos(i)] == b.values[pos(j)] and a.values[pos(j)] == b.values[pos(i)]
        swapped |= {i, j}
    for fid in DEFAULT_SCHEMA.ids:
        if fid not in swapped:
            assert a.values[pos(fid)] == b.values[pos(fid)]


# -- matrices and CSV ----------------------------------------------------------------

def test_extract_matrix_empty():
    X, D = extract_matrix([])
    assert X.shape == (0, 60) and D.shape == (0, 60)


def test_dataset_csv_round_trip(tmp_path, data_path):
    flows = assemble_flows(read_capture(data_path("handcrafted.pcap")))
    X, D = extract_matrix(flows)
    table = FlowTable([str(f.flow_id) for f in flows], np.array([1, 1, 1, 2, 2]), X,
                      np.array([1, -1, 1, -1, 1]), DEFAULT_SCHEMA.columns)
    p = tmp_path / "d.csv"
    write_dataset_csv(p, table)
    back = read_dataset_csv(p)
    assert np.array_equal(back.X, X) and back.columns == table.columns
    assert back.flow_ids == ["0", "1", "2", "3", "4"]
    assert back.task_ids.tolist() == [1, 1, 1, 2, 2] and back.labels.tolist() == [1, -1, 1, -1, 1]
    m = tmp_path / "m.csv"
    write_mask_csv(m, table.flow_ids, D, DEFAULT_SCHEMA)
    rows = m.read_text().splitlines()
    assert rows[0].startswith("flow_id,d1,d2,d3")
    assert rows[4].split(",")[3] == "0"  # lone SYN: no inter-arrival time


def test_read_dataset_rejects_other_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValidationError):
        read_dataset_csv(p)


def test_empty_flow_rejected():
    f = flow_from_events([(1, True, 0, 40)])
    with pytest.raises(ContractViolation):
        extract(dataclasses.replace(f, packets=[], from_client=[]))
