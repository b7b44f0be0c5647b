"""
Invariant suite behind the ``selftest`` command.
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from d2hnet.api.models import IspParams
from d2hnet.core import ops
from d2hnet.core.gradcheck import gradient_check
from d2hnet.core.ops import ConvParams, DeformOffsets
from d2hnet.core.tensor import GradNode
from d2hnet.nn.enhancenet import EnhanceNet
from d2hnet.services.eval_service import psnr
from d2hnet.services.noise_service import NoiseService
from d2hnet.utils.procedural import gradient_background
from d2hnet.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
OFFSET_TOL = 1e-3
DEFORM_CASES = 50
DWT_CASES = 100


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _leaf(v: np.ndarray) -> GradNode:
    return GradNode.leaf(v, requires_grad=False)


def _away_from_zero(rng: np.random.Generator, shape: tuple, margin: float = 0.1) -> np.ndarray:
    """Uniform values in +-[margin, 1]; keeps kinked ops off their kink."""
    magnitude = rng.uniform(margin, 1.0, size=shape)
    return np.where(rng.random(shape) < 0.5, -magnitude, magnitude)


def _fractional_offsets(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Offsets whose fractional part stays in [0.2, 0.8]."""
    return rng.integers(-1, 2, size=shape) + rng.uniform(0.2, 0.8, size=shape)


class SelftestService:
    """Deformable degeneracy, wavelet round trip, gradient checks and pipeline identities."""

    @staticmethod
    def deform_degeneracy(seed: int, cases: int = DEFORM_CASES) -> CheckResult:
        """Zero offsets and a unit mask must reproduce conv2d."""
        worst = 0.0
        for case in range(cases):
            rng = derive_rng(seed, case, "selftest")
            k = int(rng.choice([1, 3]))
            dilation = int(rng.choice([1, 2])) if k == 3 else 1
            n, c, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h, w = int(rng.integers(5, 13)), int(rng.integers(5, 13))
            x = rng.standard_normal((n, c, h, w)).astype(np.float32)
            p = ConvParams(
                weight=_leaf(rng.standard_normal((c_out, c, k, k)).astype(np.float32)),
                bias=_leaf(rng.standard_normal(c_out).astype(np.float32)),
                padding=dilation * (k // 2),
                dilation=dilation,
            )
            taps = k * k
            d = DeformOffsets(
                offsets=_leaf(np.zeros((n, 2 * taps, h, w), dtype=np.float32)),
                mask=_leaf(np.ones((n, taps, h, w), dtype=np.float32)),
            )
            diff = np.abs(ops.deform_conv2d(x, p, d).value - ops.conv2d(x, p).value)
            worst = max(worst, float(diff.max()))
        return CheckResult("deform_conv2d degeneracy", worst < 1e-5, f"{cases} cases, max abs diff {worst:.2e}")

    @staticmethod
    def dwt_round_trip(seed: int, cases: int = DWT_CASES) -> CheckResult:
        worst = 0.0
        for case in range(cases):
            rng = derive_rng(seed, DEFORM_CASES + case, "selftest")
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                     2 * int(rng.integers(1, 17)), 2 * int(rng.integers(1, 17)))
            x = rng.random(shape).astype(np.float32)
            back = ops.idwt2(ops.dwt2(x)).value
            worst = max(worst, float(np.abs(back - x).max()))
        return CheckResult("dwt2/idwt2 reconstruction", worst < 1e-6, f"{cases} tensors, max abs error {worst:.2e}")

    @staticmethod
    def gradient_cases(seed: int) -> list[tuple[str, Callable, dict[str, np.ndarray], dict[str, float]]]:
        """(op name, graph, float64 inputs, per-input tolerances) for every differentiable op."""
        rng = derive_rng(seed, 0, "selftest")
        x = rng.standard_normal((1, 2, 6, 6))

        def conv(v):
            return ops.conv2d(v["x"], ConvParams(v["w"], v["b"], padding=1))

        def deform(v):
            return ops.deform_conv2d(v["x"], ConvParams(v["w"], v["b"], padding=1),
                                     DeformOffsets(v["offsets"], v["mask"]))

        return [
            ("conv2d", conv,
             {"x": x, "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}, {}),
            ("conv2d_stride2", lambda v: ops.conv2d(v["x"], ConvParams(v["w"], None, stride=2, padding=1)),
             {"x": x, "w": rng.standard_normal((2, 2, 3, 3))}, {}),
            ("deform_conv2d", deform,
             {"x": rng.standard_normal((1, 2, 5, 5)), "w": rng.standard_normal((2, 2, 3, 3)),
              "b": rng.standard_normal(2), "offsets": _fractional_offsets(rng, (1, 18, 5, 5)),
              "mask": rng.uniform(0.1, 1.0, size=(1, 9, 5, 5))},
             {"offsets": OFFSET_TOL}),
            ("dwt2", lambda v: ops.dwt2(v["x"]), {"x": x}, {}),
            ("idwt2", lambda v: ops.idwt2(v["x"]), {"x": rng.standard_normal((1, 4, 3, 3))}, {}),
            ("avg_pool", lambda v: ops.avg_pool(v["x"], 2), {"x": x}, {}),
            ("bilinear_resize", lambda v: ops.bilinear_resize(v["x"], 12, 9), {"x": x}, {}),
            ("leaky_relu", lambda v: ops.leaky_relu(v["x"], 0.2), {"x": _away_from_zero(rng, x.shape)}, {}),
            ("sigmoid", lambda v: ops.sigmoid(v["x"]), {"x": x}, {}),
            ("add", lambda v: ops.add(v["x"], v["y"]), {"x": x, "y": rng.standard_normal(x.shape)}, {}),
            ("scale", lambda v: ops.scale(v["x"], 2.0), {"x": x}, {}),
            ("concat_channels", lambda v: ops.concat_channels(v["x"], v["y"]),
             {"x": x, "y": rng.standard_normal((1, 3, 6, 6))}, {}),
            ("split_channels", lambda v: ops.split_channels(v["x"], (1, 1))[1], {"x": x}, {}),
            ("l1_loss", lambda v: ops.l1_loss(v["x"], np.zeros(x.shape)), {"x": _away_from_zero(rng, x.shape)}, {}),
        ]

    @staticmethod
    def gradient_checks(seed: int) -> list[CheckResult]:
        results = []
        for name, fn, inputs, tolerances in SelftestService.gradient_cases(seed):
            report = gradient_check(fn, inputs, h=1e-6, tol=GRAD_TOL, op=name, tolerances=tolerances,
                                    rng=derive_rng(seed, 1, "selftest"))
            worst = ", ".join(f"{e.name} {e.max_rel_error:.1e}" for e in report.entries)
            results.append(CheckResult(f"gradcheck {name}", report.passed, f"rel err {worst}"))
        return results

    @staticmethod
    def isp_round_trip(seed: int, size: int = 256, border: int = 4) -> CheckResult:
        x = gradient_background(size, size, derive_rng(seed, 2, "selftest"))
        p = IspParams(gamma=2.2, wr=2.0, wb=1.7)
        y = NoiseService.process(NoiseService.unprocess(x, p), p)
        inner = (slice(None), slice(None), slice(border, -border), slice(border, -border))
        value = psnr(y[inner], x[inner])
        return CheckResult("isp round trip", value > 40.0, f"PSNR {value:.2f} dB")

    @staticmethod
    def residual_identity(seed: int) -> CheckResult:
        """A zeroed decoder and tail leave y equal to t_up."""
        rng = derive_rng(seed, 3, "selftest")
        net = EnhanceNet(derive_rng(seed, 4, "selftest"), base=4, levels=3, residual_layers=1)
        for module in net.decoder_modules():
            module.zero_()
        short, long_img, t_up = (rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(3))
        y = net(short, long_img, t_up).value
        equal = bool(np.array_equal(y, t_up))
        return CheckResult("global residual identity", equal, "bitwise" if equal else "y differs from t_up")

    @staticmethod
    def run(seed: int) -> list[CheckResult]:
        results = [
            SelftestService.deform_degeneracy(seed),
            SelftestService.dwt_round_trip(seed),
            *SelftestService.gradient_checks(seed),
            SelftestService.isp_round_trip(seed),
            SelftestService.residual_identity(seed),
        ]
        failed = [r.name for r in results if not r.passed]
        if failed:
            logger.warning(f"Selftest failures: {', '.join(failed)}")
        else:
            logger.info(f"All {len(results)} selftest checks passed")
        return results
