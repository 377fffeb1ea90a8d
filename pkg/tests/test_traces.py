import json

import numpy as np
import pytest

from toolsense.synth import SynthConfig, synth_trace
from toolsense.traces import (
    EmbeddingFormatError,
    EmbeddingMatrix,
    EmbeddingRef,
    EmbeddingStore,
    TraceParseError,
    TraceRecord,
    TraceSet,
    TraceValidationError,
    load_trace_set,
    read_embeddings,
    validate,
    write_embeddings,
    write_trace_set,
)

HEADER = '{"trace_version":1}'


def record_line(i, **overrides):
    obj = {
        "instance_id": f"x{i}", "seq_index": i, "task_name": "t", "model_id": "m",
        "s_no_tool": 0.5, "s_always_tool": 0.7,
        "self_called": False, "self_call_count": 0,
    }
    obj.update(overrides)
    return json.dumps(obj)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestTraceFile:
    def test_three_lines_round_trip(self, tmp_path):
        path = write_lines(tmp_path / "t.jsonl",
                           [HEADER, record_line(0), record_line(1), record_line(2)])
        ts = load_trace_set(path)
        assert len(ts) == 3
        assert [r.seq_index for r in ts.records] == [0, 1, 2]

    def test_score_out_of_bounds_rejected(self, tmp_path):
        path = write_lines(tmp_path / "t.jsonl",
                           [HEADER, record_line(0, s_no_tool=1.3)])
        with pytest.raises(TraceValidationError) as err:
            load_trace_set(path)
        (violation,) = err.value.violations
        assert violation.instance_id == "x0"
        assert "s_no_tool" in violation.message

    def test_duplicate_instance_id_rejected(self, tmp_path):
        dup = record_line(1).replace('"x1"', '"x0"')
        path = write_lines(tmp_path / "t.jsonl", [HEADER, record_line(0), dup])
        with pytest.raises(TraceValidationError) as err:
            load_trace_set(path)
        assert any(v.rule == "duplicate_instance_id" for v in err.value.violations)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = write_lines(tmp_path / "t.jsonl", [HEADER, record_line(0), "{not json"])
        with pytest.raises(TraceParseError) as err:
            load_trace_set(path)
        assert err.value.line_no == 3

    def test_missing_field_reports_line_number(self, tmp_path):
        broken = json.loads(record_line(0))
        del broken["s_no_tool"]
        path = write_lines(tmp_path / "t.jsonl", [HEADER, json.dumps(broken)])
        with pytest.raises(TraceParseError) as err:
            load_trace_set(path)
        assert err.value.line_no == 2
        assert "s_no_tool" in str(err.value)

    def test_missing_header_rejected(self, tmp_path):
        path = write_lines(tmp_path / "t.jsonl", [record_line(0)])
        with pytest.raises(TraceParseError):
            load_trace_set(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = write_lines(tmp_path / "t.jsonl", ['{"trace_version":99}', record_line(0)])
        with pytest.raises(TraceParseError):
            load_trace_set(path)

    def test_load_is_order_normalizing(self, tmp_path):
        lines = [record_line(i) for i in range(5)]
        a = write_lines(tmp_path / "a.jsonl", [HEADER] + lines)
        b = write_lines(tmp_path / "b.jsonl", [HEADER] + lines[::-1])
        ta, tb = load_trace_set(a), load_trace_set(b)
        assert [r.instance_id for r in ta.records] == [r.instance_id for r in tb.records]

    def test_write_then_load_round_trip(self, tmp_path):
        res = synth_trace(SynthConfig(n=20, cell_mix=((0.2, 0.1, 0.0),
                                                      (0.1, 0.3, 0.1),
                                                      (0.0, 0.1, 0.1)),
                                      with_embeddings=False), seed=3)
        path = tmp_path / "t.jsonl"
        write_trace_set(res.trace_set, path)
        loaded = load_trace_set(path)
        assert loaded.records == res.trace_set.records


class TestValidate:
    def test_clean_synthetic_set_is_empty(self):
        res = synth_trace(SynthConfig(n=30, cell_mix=((0.2, 0.1, 0.1),
                                                      (0.1, 0.2, 0.1),
                                                      (0.0, 0.1, 0.1)),
                                      with_embeddings=False), seed=1)
        assert validate(res.trace_set, check_embeddings=False) == []

    def test_call_count_mismatch(self):
        rec = TraceRecord(instance_id="a", seq_index=0, task_name="t", model_id="m",
                          s_no_tool=0.5, s_always_tool=0.5,
                          self_called=False, self_call_count=2)
        ts = TraceSet.from_records([rec])
        violations = validate(ts)
        assert len(violations) == 1
        assert violations[0].rule == "call_count_mismatch"

    def test_embedding_row_at_row_count_is_out_of_range(self, tmp_path):
        mat = EmbeddingMatrix(values=np.zeros((500, 4), dtype=np.float32),
                              layer=0, model_id="m")
        write_embeddings(mat, tmp_path / "no_tool_input_layer0.emb")
        rec = TraceRecord(
            instance_id="a", seq_index=0, task_name="t", model_id="m",
            s_no_tool=0.5, s_always_tool=0.5, self_called=False, self_call_count=0,
            embedding_refs={"no_tool_input": EmbeddingRef(
                path="no_tool_input_layer0.emb", row=500, layer=0)})
        ts = TraceSet.from_records([rec], source_dir=tmp_path)
        violations = validate(ts)
        assert [v.rule for v in violations] == ["embedding_row_range"]
        # last valid row passes
        rec_ok = TraceRecord(
            instance_id="b", seq_index=1, task_name="t", model_id="m",
            s_no_tool=0.5, s_always_tool=0.5, self_called=False, self_call_count=0,
            embedding_refs={"no_tool_input": EmbeddingRef(
                path="no_tool_input_layer0.emb", row=499, layer=0)})
        assert validate(TraceSet.from_records([rec_ok], source_dir=tmp_path)) == []

    def test_missing_embedding_file_is_a_violation(self):
        rec = TraceRecord(
            instance_id="a", seq_index=0, task_name="t", model_id="m",
            s_no_tool=0.5, s_always_tool=0.5, self_called=False, self_call_count=0,
            embedding_refs={"no_tool_input": EmbeddingRef(path="gone.emb", row=0, layer=0)})
        ts = TraceSet.from_records([rec])
        assert [v.rule for v in validate(ts)] == ["embedding_file_missing"]

    def test_validate_is_pure(self):
        rec = TraceRecord(instance_id="a", seq_index=0, task_name="t", model_id="m",
                          s_no_tool=1.5, s_always_tool=0.5,
                          self_called=False, self_call_count=0)
        ts = TraceSet.from_records([rec])
        first = validate(ts, check_embeddings=False)
        second = validate(ts, check_embeddings=False)
        assert first == second


class TestEmb1:
    def test_small_matrix_round_trips_exactly(self, tmp_path):
        mat = EmbeddingMatrix(values=np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32),
                              layer=2, model_id="m")
        path = tmp_path / "m.emb"
        write_embeddings(mat, path)
        back = read_embeddings(path)
        assert back.layer == 2 and back.model_id == "m"
        assert back.values.tobytes() == mat.values.tobytes()

    def test_random_matrices_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(10):
            rows, cols = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            mat = EmbeddingMatrix(
                values=rng.standard_normal((rows, cols)).astype(np.float32),
                layer=int(rng.integers(0, 9)), model_id=f"m{i}")
            path = tmp_path / f"m{i}.emb"
            write_embeddings(mat, path)
            back = read_embeddings(path)
            assert back.values.tobytes() == mat.values.tobytes()
            # writing the loaded matrix reproduces the file bytes
            path2 = tmp_path / f"m{i}b.emb"
            write_embeddings(back, path2)
            assert path.read_bytes() == path2.read_bytes()

    def test_truncated_payload(self, tmp_path):
        mat = EmbeddingMatrix(values=np.ones((2, 3), dtype=np.float32),
                              layer=0, model_id="m")
        path = tmp_path / "m.emb"
        write_embeddings(mat, path)
        path.write_bytes(path.read_bytes()[:-4])  # drop one float
        with pytest.raises(EmbeddingFormatError, match="payload"):
            read_embeddings(path)

    def test_zero_rows_round_trips(self, tmp_path):
        mat = EmbeddingMatrix(values=np.zeros((0, 7), dtype=np.float32),
                              layer=0, model_id="m")
        path = tmp_path / "m.emb"
        write_embeddings(mat, path)
        back = read_embeddings(path)
        assert back.rows == 0 and back.cols == 7

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.emb"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(EmbeddingFormatError, match="magic"):
            read_embeddings(path)

    def test_non_finite_write_rejected(self, tmp_path):
        mat = EmbeddingMatrix(values=np.array([[np.nan]], dtype=np.float32),
                              layer=0, model_id="m")
        with pytest.raises(ValueError, match="finite"):
            write_embeddings(mat, tmp_path / "m.emb")


class TestEmbeddingStore:
    def test_store_resolves_refs_from_dir(self, tmp_path):
        res = synth_trace(SynthConfig(n=12, cell_mix=((0.25, 0.25, 0.0),
                                                      (0.0, 0.25, 0.0),
                                                      (0.0, 0.0, 0.25)),
                                      embed_dim=5, n_layers=2), seed=9)
        trace_path = res.write_to_dir(tmp_path)
        ts = load_trace_set(trace_path)
        store = EmbeddingStore(base_dir=tmp_path)
        assert store.layers("no_tool_input") == [0, 1]
        vec = store.vector(ts.records[3], "no_tool_input", 1)
        expected = res.matrices[("no_tool_input", 1)].values[3]
        assert np.allclose(vec, expected)
        stacked = store.matrix_for(ts, "with_tool_desc", 0)
        assert stacked.shape == (12, 5)
        assert stacked.dtype == np.float64

    def test_missing_condition_ref_raises(self):
        rec = TraceRecord(instance_id="a", seq_index=0, task_name="t", model_id="m",
                          s_no_tool=0.5, s_always_tool=0.5,
                          self_called=False, self_call_count=0)
        store = EmbeddingStore.from_matrices({})
        with pytest.raises(KeyError):
            store.vector(rec, "no_tool_input", 0)
