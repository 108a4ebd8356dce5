import numpy as np
import pytest
import torch

from ivedit.errors import ContractError, InputError
from ivedit.motref import MotionReference, bilinear_warp


def rand(shape, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal(shape)).to(dtype)


class TestBilinearWarp:
    def test_zero_flow_identity(self):
        field = rand((3, 8, 8))
        flow = torch.zeros(2, 8, 8, dtype=field.dtype)
        assert torch.equal(bilinear_warp(field, flow), field)

    def test_integer_shift_oracle(self):
        field = rand((2, 6, 7), seed=1)
        flow = torch.zeros(2, 6, 7, dtype=field.dtype)
        flow[0] = 1.0  # sample from x+1: shift content left, replicate last column
        out = bilinear_warp(field, flow)
        expected = torch.cat([field[:, :, 1:], field[:, :, -1:]], dim=2)
        assert torch.equal(out, expected)

    def test_half_pixel_interpolation(self):
        row = torch.tensor([[[0.0, 1.0, 0.0, 1.0]]], dtype=torch.float64)
        flow = torch.zeros(2, 1, 4, dtype=torch.float64)
        flow[0] = 0.5
        out = bilinear_warp(row, flow)
        # interior: 0.5*self + 0.5*right
        expected = torch.tensor([[[0.5, 0.5, 0.5, 1.0]]], dtype=torch.float64)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_linearity_in_field(self):
        x, y = rand((3, 5, 5), 2), rand((3, 5, 5), 3)
        flow = rand((2, 5, 5), 4) * 0.7
        a, b = 2.0, -0.5
        lhs = bilinear_warp(a * x + b * y, flow)
        rhs = a * bilinear_warp(x, flow) + b * bilinear_warp(y, flow)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            bilinear_warp(rand((3, 4, 4)), torch.zeros(2, 5, 5, dtype=torch.float64))

    def test_gradcheck_against_central_differences(self):
        # step 1e-4 in float64 at non-integer interior coordinates
        field = rand((2, 5, 5), 7).requires_grad_(True)
        flow = (rand((2, 5, 5), 8) * 0.9 + 0.25).requires_grad_(True)
        assert torch.autograd.gradcheck(bilinear_warp, (field, flow), eps=1e-4, atol=1e-3, rtol=1e-3)


class TestMotionReference:
    def test_offsets_equal_flow_at_init(self):
        mr = MotionReference(channels=4).double()
        h_prev, h_next = rand((4, 8, 8), 1), rand((4, 8, 8), 2)
        flow = rand((2, 8, 8), 3) * 2.0
        assert torch.equal(mr.predict_offsets(h_prev, h_next, flow), flow)

    def test_zero_flow_zero_offsets_at_init(self):
        mr = MotionReference(channels=4).double()
        zero = torch.zeros(2, 8, 8, dtype=torch.float64)
        out = mr.predict_offsets(rand((4, 8, 8)), rand((4, 8, 8), 1), zero)
        assert torch.equal(out, zero)

    def test_final_bias_shifts_offsets_uniformly(self):
        mr = MotionReference(channels=4).double()
        with torch.no_grad():
            mr.offset_out.bias.fill_(0.25)
        flow = rand((2, 8, 8), 3)
        out = mr.predict_offsets(rand((4, 8, 8), 1), rand((4, 8, 8), 2), flow)
        assert torch.allclose(out, flow + 0.25, atol=1e-12)

    def test_step_identity_at_init(self):
        mr = MotionReference(channels=4).double()
        h_prev, h_next = rand((4, 8, 8), 1), rand((4, 8, 8), 2)
        flow = rand((2, 8, 8), 3)
        assert torch.equal(mr.step(h_prev, h_next, flow), h_next)

    def test_pure_propagation_limit(self):
        mr = MotionReference(channels=4).double()
        with torch.no_grad():
            mr.gamma.fill_(1.0)
            mr.alpha.fill_(0.0)
        h_prev, h_next = rand((4, 8, 8), 1), rand((4, 8, 8), 2)
        zero = torch.zeros(2, 8, 8, dtype=torch.float64)
        assert torch.equal(mr.step(h_prev, h_next, zero), h_prev)

    def test_even_blend(self):
        mr = MotionReference(channels=4).double()
        with torch.no_grad():
            mr.gamma.fill_(0.5)
            mr.alpha.fill_(0.5)
        h_prev, h_next = rand((4, 8, 8), 1), rand((4, 8, 8), 2)
        zero = torch.zeros(2, 8, 8, dtype=torch.float64)
        assert torch.allclose(mr.step(h_prev, h_next, zero), (h_prev + h_next) / 2, atol=1e-12)

    def test_sequence_identity_at_init(self):
        mr = MotionReference(channels=4).double()
        latents = rand((5, 4, 8, 8), 1)
        flows = rand((4, 2, 8, 8), 2)
        assert torch.equal(mr(latents, flows), latents)

    def test_sequence_single_frame(self):
        mr = MotionReference(channels=4).double()
        latents = rand((1, 4, 8, 8), 1)
        out = mr(latents, torch.zeros(0, 2, 8, 8, dtype=torch.float64))
        assert torch.equal(out, latents)

    def test_sequence_propagates_unenhanced_previous(self):
        mr = MotionReference(channels=4).double()
        with torch.no_grad():
            mr.gamma.fill_(1.0)
            mr.alpha.fill_(0.0)
        latents = rand((3, 4, 8, 8), 1)
        zeros = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
        out = mr(latents, zeros)
        # output = [h0, h0, h1]: step i+1 uses the UN-enhanced latents[i]
        assert torch.equal(out[0], latents[0])
        assert torch.equal(out[1], latents[0])
        assert torch.equal(out[2], latents[1])

    def test_sequence_length_mismatch(self):
        mr = MotionReference(channels=4).double()
        with pytest.raises(ContractError):
            mr(rand((3, 4, 8, 8)), torch.zeros(1, 2, 8, 8, dtype=torch.float64))

    def test_initial_parameter_values(self):
        mr = MotionReference(channels=4)
        assert mr.gamma.item() == 0.0
        assert mr.alpha.item() == 1.0
        assert mr.offset_out.weight.abs().max().item() == 0.0
        assert mr.offset_out.bias.abs().max().item() == 0.0
        assert all(p.requires_grad for p in mr.parameters())
