"""Wire format: framing, artifact encoding, and the frozen golden fixture."""
import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftrain import codec
from difftrain.codec import (
    ArtifactSet,
    Bottom,
    DtypeTag,
    FailureReason,
    FrameDecoder,
    ProtocolError,
    StringListArtifact,
    TensorArtifact,
    decode_artifact,
    decode_message,
    decode_response_artifacts,
    encode_message,
)

GOLDEN = Path(__file__).parent / "data" / "golden.bin"

json_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**31), max_value=2**31),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=20),
)
json_payloads = st.dictionaries(
    st.text(min_size=1, max_size=10),
    st.recursive(
        json_scalars,
        lambda inner: st.lists(inner, max_size=4)
        | st.dictionaries(st.text(min_size=1, max_size=8), inner, max_size=4),
        max_leaves=12,
    ),
    max_size=6,
)


class TestFraming:
    def test_round_trip(self):
        payload = {"op": "forward", "flags": {"use_cache": False}, "n": 3}
        decoded, consumed = decode_message(encode_message(payload))
        assert decoded == payload
        assert consumed == len(encode_message(payload))

    @given(json_payloads)
    @settings(max_examples=60)
    def test_round_trip_arbitrary(self, payload):
        decoded, _ = decode_message(encode_message(payload))
        assert decoded == payload

    def test_encoding_is_canonical(self):
        a = encode_message({"b": 1, "a": 2})
        b = encode_message({"a": 2, "b": 1})
        assert a == b
        body = a[4:].decode("utf-8")
        assert body == '{"a":2,"b":1}'

    def test_header_is_big_endian_length(self):
        frame = encode_message({"x": 1})
        (length,) = struct.unpack(">I", frame[:4])
        assert length == len(frame) - 4

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), float("-inf")])
    def test_nonfinite_scalars_refused_at_encode(self, bad):
        with pytest.raises(ProtocolError, match="non-finite"):
            encode_message({"loss": bad})
        with pytest.raises(ProtocolError, match="non-finite"):
            encode_message({"nested": {"vals": [1.0, bad]}})

    def test_tensor_data_may_carry_nonfinite(self):
        art = TensorArtifact("loss", (1,), DtypeTag.F32, np.asarray([np.nan]))
        frame = encode_message({"ok": True, "artifacts": {"loss": art}})
        payload, _ = decode_message(frame)
        got = decode_artifact("loss", payload["artifacts"]["loss"])
        assert math.isnan(got.data[0])

    def test_encode_frame_cap(self):
        with pytest.raises(ProtocolError) as err:
            encode_message({"pad": "x" * 100}, frame_cap=32)
        assert err.value.frame_cap_breach

    def test_decode_short_header(self):
        with pytest.raises(ProtocolError, match="short frame header"):
            decode_message(b"\x00\x01")

    def test_decode_truncated_body(self):
        frame = encode_message({"x": 1})
        with pytest.raises(ProtocolError, match="truncated"):
            decode_message(frame[:-2])

    def test_decode_declared_length_over_cap(self):
        frame = struct.pack(">I", 10_000) + b"{}"
        with pytest.raises(ProtocolError) as err:
            decode_message(frame, frame_cap=100)
        assert err.value.frame_cap_breach

    def test_decode_invalid_json(self):
        body = b"not json"
        with pytest.raises(ProtocolError, match="invalid frame body"):
            decode_message(struct.pack(">I", len(body)) + body)

    def test_decode_non_object_payload(self):
        body = b"[1,2]"
        with pytest.raises(ProtocolError, match="must be a JSON object"):
            decode_message(struct.pack(">I", len(body)) + body)


class TestTensorArtifact:
    def test_f32_round_trip(self):
        art = TensorArtifact("w", (2, 2), DtypeTag.F32, np.asarray([1.0, -2.5, 0.0, 3.25]))
        got = decode_artifact("w", art.to_json_dict())
        assert got == art
        assert got.array.shape == (2, 2)

    @pytest.mark.parametrize("tag", list(DtypeTag))
    def test_every_dtype_tag_round_trips(self, tag):
        art = TensorArtifact("t", (3,), tag, np.asarray([0.0, 1.0, 1.0]))
        got = decode_artifact("t", art.to_json_dict())
        assert got.dtype is tag
        assert got == art

    def test_i64_normalizes_to_f32_values(self):
        art = TensorArtifact("ids", (3,), DtypeTag.I64, np.asarray([5, -7, 1000], dtype=np.int64))
        assert art.data.dtype == np.float32
        assert art.data.tolist() == [5.0, -7.0, 1000.0]

    def test_i64_beyond_exact_range_warns(self, caplog):
        with caplog.at_level("WARNING"):
            TensorArtifact("ids", (1,), DtypeTag.I64, np.asarray([2**25], dtype=np.int64))
        assert any("exact f32 range" in rec.message for rec in caplog.records)

    def test_bool_normalizes_to_zero_one(self):
        art = TensorArtifact("m", (3,), DtypeTag.BOOL, np.asarray([True, False, True]))
        assert art.data.tolist() == [1.0, 0.0, 1.0]

    def test_shape_data_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match shape"):
            TensorArtifact("w", (2, 2), DtypeTag.F32, np.asarray([1.0, 2.0]))

    def test_scalar_helper_has_empty_shape(self):
        art = codec.scalar("loss", 2.5)
        assert art.shape == ()
        assert art.data.tolist() == [2.5]

    def test_bitwise_equality(self):
        a = TensorArtifact("w", (2,), DtypeTag.F32, np.asarray([0.1, 0.2]))
        b = TensorArtifact("w", (2,), DtypeTag.F32, np.asarray([0.1, 0.2]))
        bumped = np.nextafter(np.float32(0.2), np.float32(1.0))
        c = TensorArtifact("w", (2,), DtypeTag.F32, np.asarray([0.1, bumped]))
        assert a == b
        assert a != c
        assert a != Bottom(FailureReason.NONFINITE, "x")


class TestDecodeArtifact:
    def test_strings_round_trip_unicode(self):
        art = StringListArtifact("text", ("héllo", "wörld"))
        got = decode_artifact("text", art.to_json_dict())
        assert got == art

    def test_strings_must_be_strings(self):
        with pytest.raises(ProtocolError, match="list of strings"):
            decode_artifact("text", {"strings": ["ok", 3]})

    @pytest.mark.parametrize("missing", ["shape", "dtype", "data"])
    def test_missing_field(self, missing):
        raw = TensorArtifact("w", (1,), DtypeTag.F32, np.asarray([1.0])).to_json_dict()
        del raw[missing]
        with pytest.raises(ProtocolError, match=f"missing '{missing}'"):
            decode_artifact("w", raw)

    def test_unknown_dtype_tag(self):
        raw = TensorArtifact("w", (1,), DtypeTag.F32, np.asarray([1.0])).to_json_dict()
        raw["dtype"] = "f64"
        with pytest.raises(ProtocolError, match="unknown dtype tag"):
            decode_artifact("w", raw)

    @pytest.mark.parametrize("shape", [[-1], ["2"], "nope", [1.5]])
    def test_bad_shape(self, shape):
        raw = TensorArtifact("w", (1,), DtypeTag.F32, np.asarray([1.0])).to_json_dict()
        raw["shape"] = shape
        with pytest.raises(ProtocolError, match="shape must be"):
            decode_artifact("w", raw)

    def test_bad_base64(self):
        raw = TensorArtifact("w", (1,), DtypeTag.F32, np.asarray([1.0])).to_json_dict()
        raw["data"] = "!!!not-base64!!!"
        with pytest.raises(ProtocolError, match="bad base64"):
            decode_artifact("w", raw)

    def test_byte_count_must_match_shape(self):
        raw = TensorArtifact("w", (2,), DtypeTag.F32, np.asarray([1.0, 2.0])).to_json_dict()
        raw["shape"] = [3]
        with pytest.raises(ProtocolError, match="does not match shape"):
            decode_artifact("w", raw)

    def test_non_object_artifact(self):
        with pytest.raises(ProtocolError, match="must be an object"):
            decode_artifact("w", [1, 2, 3])


class TestArtifactSet:
    def test_missing_name_degrades_to_bottom(self):
        arts = ArtifactSet(probe_op="forward")
        got = arts.get("logits")
        assert isinstance(got, Bottom)
        assert got.reason is FailureReason.MISSING_ARTIFACT
        assert "forward" in got.error

    def test_custom_missing_error(self):
        arts = ArtifactSet(probe_op="forward")
        assert arts.get("values", error="PPO model must return values.").error == (
            "PPO model must return values."
        )

    def test_names_sorted_and_prefix_filter(self):
        arts = decode_response_artifacts(
            {
                "artifacts": {
                    "params/b": TensorArtifact("params/b", (1,), DtypeTag.F32, [1.0]).to_json_dict(),
                    "params/a": TensorArtifact("params/a", (1,), DtypeTag.F32, [2.0]).to_json_dict(),
                    "loss": TensorArtifact("loss", (1,), DtypeTag.F32, [3.0]).to_json_dict(),
                }
            },
            "export_params",
        )
        assert arts.names() == ["loss", "params/a", "params/b"]
        assert sorted(arts.with_prefix("params/")) == ["params/a", "params/b"]


class TestFrameDecoder:
    def test_multiple_frames_one_feed(self):
        frames = [{"i": i} for i in range(5)]
        blob = b"".join(encode_message(f) for f in frames)
        assert list(FrameDecoder().feed(blob)) == frames

    @given(st.lists(st.integers(min_value=1, max_value=7), min_size=0, max_size=40))
    @settings(max_examples=60)
    def test_chunk_boundaries_never_change_output(self, cuts):
        frames = [{"i": i, "pad": "x" * (i % 5)} for i in range(6)]
        blob = b"".join(encode_message(f) for f in frames)
        dec = FrameDecoder()
        got = []
        pos = 0
        for cut in cuts:
            got.extend(dec.feed(blob[pos : pos + cut]))
            pos += cut
        got.extend(dec.feed(blob[pos:]))
        assert got == frames
        assert dec.pending_bytes == 0

    def test_cap_breach_raises_mid_stream(self):
        dec = FrameDecoder(frame_cap=16)
        ok = encode_message({"a": 1})
        big = struct.pack(">I", 1000)
        list(dec.feed(ok))
        with pytest.raises(ProtocolError) as err:
            list(dec.feed(big))
        assert err.value.frame_cap_breach

    def test_pending_bytes_tracks_partial_frame(self):
        dec = FrameDecoder()
        frame = encode_message({"a": 1})
        assert list(dec.feed(frame[:5])) == []
        assert dec.pending_bytes == 5


class TestGoldenFixture:
    """tests/data/golden.bin was emitted by a hand-rolled encoder; it must
    decode exactly and re-encode byte-identically."""

    def frames(self):
        dec = FrameDecoder()
        return list(dec.feed(GOLDEN.read_bytes()))

    def test_frame_count(self):
        assert len(self.frames()) == 11

    def test_handshake_frame(self):
        assert self.frames()[0] == {
            "capabilities": ["generate"],
            "method": "sft",
            "protocol": 1,
        }

    def test_request_frames_match_contract_requests(self):
        from difftrain.contract import BoundedConfig, Method, build_contract

        contract = build_contract(BoundedConfig(method=Method.SFT))
        frames = self.frames()
        by_op = {f["op"]: f for f in frames if "op" in f}
        for probe in contract.probes:
            lr = 0.001 if probe.kind.value == "replay_step" else None
            request = probe.request(contract.config, lr=lr)
            if probe.kind.value == "replay_step" and request["step"] != 0:
                continue
            assert by_op[request["op"]] == request

    def test_artifact_frame_decodes(self):
        arts = decode_response_artifacts(self.frames()[8], "forward")
        w = arts.get("params/w")
        assert w.shape == (2, 3)
        assert w.dtype is DtypeTag.F32
        assert w.data.tolist() == [0.0, 0.5, -1.5, 3.25, -0.125, 2.0]
        assert arts.get("train_args/base_lr").shape == ()
        assert arts.get("hidden_states/0").dtype is DtypeTag.F16
        assert arts.get("values").data.tolist() == [0.15625]
        assert arts.get("batch/input_ids").data.tolist() == [3.0, 1.0, 4.0, 1.0, 5.0]
        assert arts.get("batch/attention_mask").dtype is DtypeTag.BOOL
        assert arts.get("generated_text").values == ("hello", "wörld")
        assert arts.get("empty").data.size == 0

    def test_error_frame(self):
        assert self.frames()[9] == {"ok": False, "kind": "runtime_error", "error": "boom"}

    def test_reencoding_reproduces_exact_bytes(self):
        blob = GOLDEN.read_bytes()
        assert b"".join(encode_message(f) for f in self.frames()) == blob

    def test_generator_script_agrees(self):
        spec = Path(__file__).parent.parent / "scripts" / "make_golden_fixture.py"
        namespace = {"__name__": "golden_gen", "__file__": str(spec)}
        exec(compile(spec.read_text(), str(spec), "exec"), namespace)
        assert namespace["emit"]() == GOLDEN.read_bytes()
