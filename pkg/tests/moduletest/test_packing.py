"""
Tests for the packing module.
"""

import numpy as np
import pytest

from quantized_rnn.models import QuantizerSpec
from quantized_rnn.numerics import make_rng
from quantized_rnn.quantize import quantize
from quantized_rnn.packing import (
    HEADER,
    PAIR,
    FLAG_BINARY_PAIR,
    FLAG_FIXED_POINT,
    FLAG_VECTOR,
    PackedTensor,
    pack,
    unpack,
    write_packed,
    read_packed,
    payload_ratio,
    spec_for,
)
from quantized_rnn.exceptions import QuantizationValueError, PackedFormatError, ConfigurationError

BINARY = QuantizerSpec(method="binary", variant="deterministic")
TERNARY = QuantizerSpec(method="ternary", variant="deterministic")
POW2 = QuantizerSpec(method="pow2ternary")
POW2_FIXED = QuantizerSpec(method="pow2ternary", m=2, f=3, ternary_clamp=False)
EXPQUANT = QuantizerSpec(method="expquant", variant="deterministic")
TERNARY_STOCH = QuantizerSpec(method="ternary", variant="stochastic")
EXPQUANT_STOCH = QuantizerSpec(method="expquant", variant="stochastic")


def _quantized(spec: QuantizerSpec, shape, seed: int = 0) -> np.ndarray:
    w = make_rng(seed, "data").uniform(-4, 4, size=shape)
    return quantize(w, spec, make_rng(seed, "quantize"))


class TestPackBinary:
    """Test 1-bit packing."""

    @pytest.mark.unit
    def test_small_round_trip(self):
        """[-1, +1, +1, -1] packs into one byte."""
        q = np.array([[-1.0, 1.0, 1.0, -1.0]])
        packed = pack(q, BINARY)
        assert packed.width == 1
        assert len(packed.payload) == 1
        np.testing.assert_array_equal(unpack(packed), q)

    @pytest.mark.unit
    def test_payload_size(self):
        """1000 binary weights need 125 bytes."""
        packed = pack(_quantized(BINARY, (10, 100)), BINARY)
        assert len(packed.payload) == 125
        assert len(packed.to_bytes()) == HEADER.size + 125
        assert payload_ratio(packed) == pytest.approx(32.0)

    @pytest.mark.unit
    def test_value_outside_set(self):
        """Packing 0.3 as binary names the index and value."""
        with pytest.raises(QuantizationValueError) as exc:
            pack(np.array([0.3]), BINARY)
        assert exc.value.index == (0,)
        assert exc.value.value == pytest.approx(0.3)
        assert "0.3" in str(exc.value)

    @pytest.mark.unit
    def test_offending_index_in_matrix(self):
        """The first bad entry of a matrix is reported by (row, col)."""
        q = np.array([[1.0, -1.0], [1.0, 0.5]])
        with pytest.raises(QuantizationValueError) as exc:
            pack(q, BINARY)
        assert exc.value.index == (1, 1)

    @pytest.mark.unit
    def test_value_pair_in_header(self):
        """A non-default value pair sets the flag and extends the header."""
        spec = QuantizerSpec(method="binary", variant="deterministic", binary_values=(-0.5, 0.0))
        q = np.array([[-0.5, 0.0, 0.0]])
        packed = pack(q, spec)
        assert packed.flags & FLAG_BINARY_PAIR
        blob = packed.to_bytes()
        assert len(blob) == HEADER.size + PAIR.size + 1
        restored = PackedTensor.from_bytes(blob)
        assert restored.binary_values == (-0.5, 0.0)
        np.testing.assert_array_equal(unpack(restored), q)


class TestPackTernary:
    """Test 2-bit packing."""

    @pytest.mark.unit
    def test_payload_size(self):
        """1000 ternary weights need 250 bytes and round-trip exactly."""
        q = _quantized(TERNARY, (1000,))
        packed = pack(q, TERNARY)
        assert len(packed.payload) == 250
        np.testing.assert_array_equal(unpack(packed).ravel(), q)

    @pytest.mark.unit
    def test_pow2_scale(self):
        """Q1.1 values are stored with scale 0.5."""
        q = np.array([[-0.5, 0.0, 0.5]])
        packed = pack(q, POW2)
        assert packed.width == 2
        assert packed.scale == 0.5
        np.testing.assert_array_equal(unpack(packed), q)

    @pytest.mark.unit
    def test_reserved_code(self):
        """Code 11 is rejected on decode."""
        packed = PackedTensor("ternary", (1, 4), 2, bytes([0xFF]))
        with pytest.raises(PackedFormatError):
            unpack(packed)

    @pytest.mark.unit
    def test_fixed_point(self):
        """Unclamped pow2 values use sign-magnitude fixed-point codes."""
        q = np.array([[-4.0, -0.125, 0.0, 1.375, 4.0]])
        packed = pack(q, POW2_FIXED)
        assert packed.flags & FLAG_FIXED_POINT
        assert packed.width == 2 + 3 + 2
        np.testing.assert_array_equal(unpack(packed), q)
        assert spec_for(packed) == POW2_FIXED


class TestPackExpQuant:
    """Test sign + exponent packing."""

    @pytest.mark.unit
    def test_width(self):
        """e_min=-8, e_max=0 needs 4 exponent bits plus a sign bit."""
        packed = pack(np.array([[0.5, -0.25, 0.0, 1.0, 2.0 ** -8]]), EXPQUANT)
        assert packed.width == 5
        np.testing.assert_array_equal(unpack(packed), [[0.5, -0.25, 0.0, 1.0, 2.0 ** -8]])

    @pytest.mark.unit
    def test_out_of_range_exponent(self):
        """Powers outside [e_min, e_max] are not in the value set."""
        with pytest.raises(QuantizationValueError):
            pack(np.array([2.0]), EXPQUANT)


class TestContainer:
    """Test the on-disk container."""

    @pytest.mark.unit
    def test_file_round_trip(self, tmp_path):
        """write_packed/read_packed preserve every field."""
        packed = pack(_quantized(EXPQUANT, (7, 9)), EXPQUANT)
        size = write_packed(tmp_path / "w.qpkt", packed)
        assert size == len(packed.to_bytes())
        assert read_packed(tmp_path / "w.qpkt") == packed

    @pytest.mark.unit
    def test_bad_magic(self):
        """Wrong magic bytes are rejected."""
        blob = b"XXXX" + pack(np.array([[1.0]]), BINARY).to_bytes()[4:]
        with pytest.raises(PackedFormatError, match="magic"):
            PackedTensor.from_bytes(blob)

    @pytest.mark.unit
    def test_truncated(self):
        """A short payload is rejected."""
        blob = pack(_quantized(TERNARY, (4, 8)), TERNARY).to_bytes()
        with pytest.raises(PackedFormatError):
            PackedTensor.from_bytes(blob[:-1])
        with pytest.raises(PackedFormatError):
            PackedTensor.from_bytes(blob[:5])

    @pytest.mark.unit
    def test_identity_not_packed(self):
        """Identity groups are stored unpacked."""
        with pytest.raises(ConfigurationError):
            pack(np.array([[0.3]]), QuantizerSpec(method="identity"))

    @pytest.mark.unit
    def test_spec_for(self):
        """The value set of a container can be recovered."""
        assert spec_for(pack(np.array([[1.0]]), BINARY)) == BINARY
        assert spec_for(pack(np.array([[0.5]]), POW2)) == POW2
        assert spec_for(pack(np.array([[0.5]]), EXPQUANT)) == EXPQUANT


class TestLargeRoundTrip:
    """Bit-exact round trip of a million entries."""

    @pytest.mark.acceptance
    @pytest.mark.parametrize("spec", [BINARY, TERNARY, POW2, POW2_FIXED, EXPQUANT], ids=lambda s: s.label)
    def test_million_entries(self, spec):
        """pack then unpack returns the input for 10^6 entries."""
        q = _quantized(spec, (1000, 1000), seed=5)
        packed = pack(q, spec)
        np.testing.assert_array_equal(unpack(packed), q)
        if spec.method == "binary":
            assert len(packed.payload) == 125_000
        if spec.method == "ternary":
            assert len(packed.payload) == 250_000


class TestByteExact:
    """unpack(pack(q)) reproduces q byte for byte."""

    @pytest.mark.unit
    @pytest.mark.parametrize("spec", [BINARY, TERNARY, TERNARY_STOCH, POW2, POW2_FIXED, EXPQUANT, EXPQUANT_STOCH],
                             ids=lambda s: s.label)
    @pytest.mark.parametrize("shape", [(6, 11), (13,)], ids=["matrix", "vector"])
    def test_bytes_and_shape(self, spec, shape):
        """Shape, dtype and every bit survive, including zeros of negative masters."""
        w = make_rng(3, "data").uniform(-0.6, 0.6, size=shape)
        q = quantize(w, spec, make_rng(3, "quantize"))
        restored = unpack(pack(q, spec), dtype=q.dtype)
        assert restored.shape == q.shape
        assert restored.tobytes() == q.tobytes()

    @pytest.mark.unit
    def test_vector_flag(self):
        """A bias vector is flagged and comes back one-dimensional from disk."""
        q = np.array([1.0, -1.0, 0.0, 0.0, 1.0])
        packed = PackedTensor.from_bytes(pack(q, TERNARY).to_bytes())
        assert packed.flags & FLAG_VECTOR
        assert unpack(packed).shape == (5,)
        assert not pack(q.reshape(1, -1), TERNARY).flags & FLAG_VECTOR
