import math

import numpy as np
import pytest
import torch

from masktok.quantize import DecodeError, VectorQuantizer, usage_stats


def make_quantizer(codebook: np.ndarray) -> VectorQuantizer:
    vq = VectorQuantizer(codebook.shape[0], codebook.shape[1])
    with torch.no_grad():
        vq.codebook.copy_(torch.as_tensor(codebook, dtype=vq.codebook.dtype))
    return vq.double()


class TestQuantize:
    def test_single_code_always_chosen(self, rng):
        vq = make_quantizer(np.array([[0.3, -0.2]]))
        z = torch.as_tensor(rng.normal(size=(5, 2)))
        assert (vq(z).indices == 0).all()

    def test_nearest_neighbor_and_commitment_value(self):
        vq = make_quantizer(np.array([[0.0, 0.0], [1.0, 1.0]]))
        result = vq(torch.tensor([[0.9, 0.8]], dtype=torch.float64))
        assert result.indices.tolist() == [1]
        assert result.commitment_loss.item() == pytest.approx(0.1**2 + 0.2**2, abs=1e-12)
        assert result.codebook_loss.item() == pytest.approx(0.05, abs=1e-12)

    def test_exact_tie_breaks_to_lowest_index(self):
        codebook = np.zeros((8, 2))
        codebook[3] = [1.0, 0.0]
        codebook[7] = [-1.0, 0.0]
        for i in (0, 1, 2, 4, 5, 6):
            codebook[i] = [0.0, 5.0]  # far away
        vq = make_quantizer(codebook)
        result = vq(torch.zeros(1, 2, dtype=torch.float64))
        assert result.indices.tolist() == [3]

    def test_distance_optimality_exhaustive(self, rng):
        vq = make_quantizer(rng.normal(size=(64, 8)))
        z = torch.as_tensor(rng.normal(size=(40, 8)))
        result = vq(z)
        dist = ((z[:, None, :] - vq.codebook[None]) ** 2).sum(-1)
        chosen = dist[torch.arange(40), result.indices]
        assert (chosen <= dist.min(dim=1).values + 1e-12).all()

    def test_idempotent_on_code_vectors(self, rng):
        vq = make_quantizer(rng.normal(size=(16, 4)))
        first = vq(torch.as_tensor(rng.normal(size=(10, 4))))
        second = vq(first.quantized)
        assert (second.indices == first.indices).all()
        assert second.commitment_loss.item() == 0.0

    def test_quantized_rows_are_codebook_rows_bit_exact(self, rng):
        vq = make_quantizer(rng.normal(size=(16, 4)))
        result = vq(torch.as_tensor(rng.normal(size=(3, 5, 4))))
        looked_up = vq.lookup(result.indices)
        assert (looked_up == result.quantized).all()

    def test_straight_through_gradient_identity(self, rng):
        vq = make_quantizer(rng.normal(size=(16, 4)))
        z = torch.as_tensor(rng.normal(size=(6, 4))).requires_grad_(True)
        result = vq(z)
        downstream_grad = {}
        result.straight_through.register_hook(lambda g: downstream_grad.setdefault("g", g.clone()))
        loss = (result.straight_through * torch.as_tensor(rng.normal(size=(6, 4)))).sum()
        loss.backward()
        assert torch.equal(z.grad, downstream_grad["g"])

    def test_losses_nonnegative_and_zero_iff_on_codes(self, rng):
        vq = make_quantizer(rng.normal(size=(8, 3)))
        z = torch.as_tensor(rng.normal(size=(5, 3)))
        result = vq(z)
        assert result.codebook_loss.item() > 0
        assert result.commitment_loss.item() > 0
        on_codes = vq(result.quantized)
        assert on_codes.codebook_loss.item() == 0.0
        assert on_codes.commitment_loss.item() == 0.0

    def test_dimension_mismatch_rejected(self, rng):
        vq = make_quantizer(rng.normal(size=(8, 3)))
        with pytest.raises(ValueError, match="dim"):
            vq(torch.zeros(2, 4, dtype=torch.float64))


class TestLookup:
    def test_empty_sequence_rejected(self, rng):
        vq = make_quantizer(rng.normal(size=(8, 3)))
        with pytest.raises(DecodeError, match="non-empty"):
            vq.lookup([])

    def test_repeated_index_gives_identical_rows(self, rng):
        vq = make_quantizer(rng.normal(size=(8, 3)))
        rows = vq.lookup([0, 0, 0])
        assert rows.shape == (3, 3)
        assert (rows == rows[0]).all()

    def test_out_of_range_names_position(self, rng):
        vq = make_quantizer(rng.normal(size=(8, 3)))
        with pytest.raises(DecodeError, match="position 2"):
            vq.lookup([1, 2, 99])


class TestUsageStats:
    def test_single_code_perplexity_one(self):
        stats = usage_stats([[5, 5, 5, 5]], codebook_size=16)
        assert stats.perplexity == pytest.approx(1.0)
        assert stats.counts[5] == 4

    def test_uniform_perplexity_equals_codebook_size(self):
        stats = usage_stats([list(range(16))], codebook_size=16)
        assert stats.perplexity == pytest.approx(16.0)

    def test_worked_example(self):
        stats = usage_stats([[1, 1, 1, 2]], codebook_size=4)
        h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert stats.perplexity == pytest.approx(math.exp(h), abs=1e-12)
        assert stats.perplexity == pytest.approx(1.7548, abs=1e-4)
