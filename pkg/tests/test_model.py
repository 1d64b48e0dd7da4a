"""Block composition, architecture audit, checkpoints, denoising contract."""
import json
import zlib

import numpy as np
import pytest

from octdn import model
from octdn.errors import (BadMagicError, ChecksumMismatchError,
                          DataFormatError, ShapeError, TruncatedFileError,
                          VersionMismatchError)
from octdn.model import (ArchitectureAuditError, Checkpoint, Network,
                         NetworkSpec, branch_forward, cbn_forward, denoise,
                         load_checkpoint, network_forward, res_forward,
                         save_checkpoint)
from octdn.nn import BNParams, ConvParams, Mode, grad_check


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def small_net(width=8, seed=0, dtype=np.float64):
    return Network(NetworkSpec(width=width), rng=np.random.default_rng(seed),
                   dtype=dtype)


def delta_conv(ch):
    w = np.zeros((ch, ch, 3, 3))
    for c in range(ch):
        w[c, c, 1, 1] = 1.0
    return ConvParams(weights=w, bias=np.zeros(ch))


def zero_conv(ci, co):
    return ConvParams(weights=np.zeros((co, ci, 3, 3)), bias=np.zeros(co))


def unit_bn(ch, beta=0.0):
    return BNParams(gamma=np.ones(ch), beta=np.full(ch, beta),
                    running_mean=np.zeros(ch), running_var=np.ones(ch))


class TestArchitecture:
    def test_depth_is_twelve(self):
        assert NetworkSpec().depth() == 12

    def test_conv_count_is_fourteen(self):
        assert NetworkSpec().conv_count() == 14

    def test_default_width(self):
        assert NetworkSpec().width == 64

    def test_audit_report(self):
        rep = small_net().audit()
        assert rep.depth == 12
        assert rep.conv_count == 14
        assert rep.uniform

    def test_audit_runs_at_construction(self):
        bad = NetworkSpec(blocks=("CBN", "Res", "OutputConv"))
        assert bad.depth() == 3
        with pytest.raises(ArchitectureAuditError):
            Network(bad, rng=np.random.default_rng(0))

    def test_block_order_validated(self):
        with pytest.raises(ValueError):
            NetworkSpec(blocks=("Res", "CBN", "OutputConv"))
        with pytest.raises(ValueError):
            NetworkSpec(blocks=("CBN", "Res", "CBN"))
        with pytest.raises(ValueError):
            NetworkSpec(blocks=("CBN", "OutputConv", "OutputConv"))


class TestCbnForward:
    def test_zero_path(self):
        x = rand((1, 2, 4, 5), seed=1)
        out = cbn_forward(x, zero_conv(2, 3), unit_bn(3), Mode.INFER)
        assert np.array_equal(out, np.zeros((1, 3, 4, 5)))

    @pytest.mark.parametrize("h,w", [(5, 7), (128, 128)])
    def test_spatial_dims_preserved(self, h, w):
        x = rand((1, 1, h, w), seed=2)
        p = ConvParams(weights=rand((4, 1, 3, 3), seed=3), bias=np.zeros(4))
        out = cbn_forward(x, p, unit_bn(4), Mode.TRAIN)
        assert out.shape == (1, 4, h, w)

    def test_grad_check(self):
        from octdn.model import CBNBlock
        block = CBNBlock(2, 3, 3, np.random.default_rng(4), np.float64)
        report = grad_check(block, rand((2, 5, 5, 2), seed=5))
        assert report.passed, str(report)


class TestBranchForward:
    def test_zero_paths(self):
        x = rand((1, 3, 4, 4), seed=6)
        out = branch_forward(x, zero_conv(3, 3), unit_bn(3),
                             zero_conv(3, 3), zero_conv(3, 3), Mode.INFER)
        assert np.array_equal(out, np.zeros_like(x))

    def test_identity_convs_pass_input_through(self):
        x = rand((1, 3, 5, 6), seed=7)
        out = branch_forward(x, zero_conv(3, 3), unit_bn(3),
                             delta_conv(3), delta_conv(3), Mode.INFER)
        assert np.allclose(out, x, atol=1e-12)

    def test_plain_convs_carry_no_activation(self):
        # negative values must survive the two-conv path
        x = -np.abs(rand((1, 2, 4, 4), seed=8)) - 0.5
        out = branch_forward(x, zero_conv(2, 2), unit_bn(2),
                             delta_conv(2), delta_conv(2), Mode.INFER)
        assert (out < 0).all()

    def test_grad_check(self):
        from octdn.model import BranchBlock
        block = BranchBlock(3, 3, np.random.default_rng(9), np.float64)
        report = grad_check(block, rand((1, 5, 5, 3), seed=10))
        assert report.passed, str(report)


class TestResForward:
    def test_identity_shortcut_when_transform_is_zero(self):
        x = np.abs(rand((1, 2, 4, 4), seed=11))
        out = res_forward(x, zero_conv(2, 2), unit_bn(2),
                          zero_conv(2, 2), unit_bn(2, beta=0.0), Mode.INFER)
        assert np.allclose(out, x, atol=1e-12)

    def test_shape_preserved_at_full_width(self):
        x = rand((2, 64, 16, 16), seed=12)
        p1 = ConvParams(weights=rand((64, 64, 3, 3), seed=13) * 0.05,
                        bias=np.zeros(64))
        p2 = ConvParams(weights=rand((64, 64, 3, 3), seed=14) * 0.05,
                        bias=np.zeros(64))
        out = res_forward(x, p1, unit_bn(64), p2, unit_bn(64), Mode.TRAIN)
        assert out.shape == x.shape

    def test_output_nonnegative(self):
        x = rand((1, 3, 6, 6), seed=15)
        p1 = ConvParams(weights=rand((3, 3, 3, 3), seed=16), bias=np.zeros(3))
        p2 = ConvParams(weights=rand((3, 3, 3, 3), seed=17), bias=np.zeros(3))
        out = res_forward(x, p1, unit_bn(3), p2, unit_bn(3), Mode.TRAIN)
        assert (out >= 0).all()

    def test_grad_check(self):
        from octdn.model import ResBlock
        block = ResBlock(3, 3, np.random.default_rng(18), np.float64)
        report = grad_check(block, rand((1, 5, 5, 3), seed=19))
        assert report.passed, str(report)


class TestNetworkForward:
    def test_output_dims_equal_input_dims(self):
        net = small_net()
        for h, w in [(3, 3), (8, 8), (37, 41), (13, 7)]:
            x = rand((1, 1, h, w), seed=h * 100 + w)
            assert network_forward(x, net).shape == (1, 1, h, w)

    def test_sub_minimum_size_rejected(self):
        net = small_net()
        with pytest.raises(ShapeError):
            network_forward(rand((1, 1, 2, 5)), net)

    def test_infer_deterministic_bit_identical(self):
        net = small_net(seed=20)
        x = rand((1, 1, 12, 12), seed=21)
        a = network_forward(x, net)
        b = network_forward(x, net)
        assert a.tobytes() == b.tobytes()

    def test_infer_does_not_touch_running_stats(self):
        net = small_net(seed=22)
        before = [a.copy() for a in net.param_arrays()]
        network_forward(rand((1, 1, 10, 10), seed=23), net)
        after = net.param_arrays()
        assert all(np.array_equal(x, y) for x, y in zip(before, after))

    def test_full_network_grad_check(self):
        # width kept small so the parameter sweep stays fast
        net = Network(NetworkSpec(width=2), rng=np.random.default_rng(24))
        report = grad_check(net, rand((1, 6, 6, 1), seed=25))
        assert report.passed, str(report)


class TestDenoise:
    def test_zero_network_returns_input(self):
        net = Network(NetworkSpec(width=8))  # rng omitted: all-zero weights
        img = np.random.default_rng(26).random((20, 24))
        assert np.array_equal(denoise(img, net), img)

    def test_constant_bias_is_subtracted(self):
        net = Network(NetworkSpec(width=8))
        head = net.blocks[-1].conv
        head.b[:] = 0.25
        img = np.full((10, 10), 0.6)
        out = denoise(img, net)
        assert np.allclose(out, 0.35, atol=1e-12)

    def test_output_clamped_to_unit_range(self):
        net = small_net(seed=27)
        img = np.random.default_rng(28).random((16, 16))
        out = denoise(img, net)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            denoise(np.zeros((2, 3, 4)), small_net())


class TestCheckpoint:
    def test_round_trip_forward_bit_exact(self, tmp_path):
        net = small_net(seed=29)
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(net, epoch=3, seed=9), path)
        loaded = load_checkpoint(path)
        assert loaded.epoch == 3 and loaded.seed == 9
        net2 = loaded.to_network()
        x = rand((1, 1, 9, 9), seed=30)
        assert network_forward(x, net).tobytes() == \
            network_forward(x, net2).tobytes()

    def test_two_saves_byte_identical(self, tmp_path):
        ckpt = Checkpoint.from_network(small_net(seed=31))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(ckpt, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_save_round_trip_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net(seed=32),
                                                loss_history=[(0, 1.0, 2.0)]),
                        p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"WHAT" + b"\0" * 100)
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net()), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        # keep the checksum consistent so only the version is wrong
        raw[-4:] = zlib.crc32(bytes(raw[:-4])).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net()), path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net(seed=33)), path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net()), path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_header_fields(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(Checkpoint.from_network(small_net()), path)
        raw = path.read_bytes()
        assert raw[:4] == b"OCTD"
        version = int.from_bytes(raw[4:8], "little")
        assert version == model.CHECKPOINT_VERSION
        desc_len = int.from_bytes(raw[8:12], "little")
        desc = json.loads(raw[12:12 + desc_len])
        assert desc["width"] == 8
        crc = int.from_bytes(raw[-4:], "little")
        assert crc == zlib.crc32(raw[:-4])

    def test_no_partial_file_on_failed_save(self, tmp_path):
        ckpt = Checkpoint.from_network(small_net())
        ckpt.param_arrays = ckpt.param_arrays[:-1]  # now inconsistent
        path = tmp_path / "m.ckpt"
        with pytest.raises(Exception):
            save_checkpoint(ckpt, path)
        assert not path.exists()
