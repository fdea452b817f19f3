"""Release gate: oracle, equivalence and gradient checks run from the CLI.

Each check returns ``(ok, detail)``. :func:`inject_fault` exists only so
tests can confirm that a deliberately broken build is caught.
"""

from __future__ import annotations

import contextlib
import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import container, eval as ev, mamba_block as mb, model, oracles, selective_scan as ss, ssm_core
from .audio_frontend import Waveform, log_mel, patchify
from .numerics import Rng, Tensor, grad_check, grad_check_params

FAULTS = ("zoh-sign",)


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Temporarily corrupt one kernel. ``zoh-sign`` flips the exponent sign in the ZOH input term."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; choose from {FAULTS}")
    original = ssm_core.expm1_over_x
    ssm_core.expm1_over_x = lambda x: original(-np.asarray(x))
    try:
        yield
    finally:
        ssm_core.expm1_over_x = original


def _random_lti(rng: np.random.Generator, n: int):
    A = -rng.uniform(0.01, 2.0, n)
    return ssm_core.SsmParams(A, rng.standard_normal(n), rng.standard_normal(n), float(rng.uniform(0.01, 1.0)))


def check_zoh_golden():
    d = ssm_core.discretize_zoh(ssm_core.SsmParams([-1.0], [1.0], [1.0], math.log(2.0)))
    e = max(abs(d.A_bar[0] - 0.5), abs(d.B_bar[0] - 0.5))
    d0 = ssm_core.discretize_zoh(ssm_core.SsmParams([0.0], [2.0], [1.0], 0.25))
    e0 = max(abs(d0.A_bar[0] - 1.0), abs(d0.B_bar[0] - 0.5))
    return max(e, e0) < 1e-12, f"max err {max(e, e0):.2e}"


def check_zoh_dense():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        p = _random_lti(rng, 4)
        d = ssm_core.discretize_zoh(p)
        Ad, Bd = oracles.dense_zoh(np.diag(p.A), p.B, p.delta)
        x = rng.standard_normal(32)
        y = ssm_core.ssm_recurrence(d, p.C, x)
        worst = max(worst, np.abs(np.diag(Ad) - d.A_bar).max(), np.abs(Bd - d.B_bar).max(),
                    np.abs(oracles.dense_recurrence(Ad, Bd, p.C, x) - y).max())
    return worst < 1e-10, f"max diff {worst:.2e}"


def check_lti_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        p = _random_lti(rng, int(rng.integers(1, 17)))
        M = int(rng.integers(1, 513))
        d = ssm_core.discretize_zoh(p)
        x = rng.standard_normal(M)
        y_rec = ssm_core.ssm_recurrence(d, p.C, x)
        y_conv = ssm_core.causal_convolve(x, ssm_core.materialize_kernel(d, p.C, M))
        worst = max(worst, np.abs(y_rec - y_conv).max())
    return worst < 1e-8, f"max diff {worst:.2e} over 200 cases"


def _random_scan(rng: np.random.Generator, L: int, D: int, N: int):
    return ss.SelectiveScanInput(
        x=rng.standard_normal((L, D)), delta=rng.uniform(0.01, 0.5, (L, D)),
        B_t=rng.standard_normal((L, N)), C_t=rng.standard_normal((L, N)),
        A=-rng.uniform(0.1, 2.0, (D, N)), D_skip=rng.standard_normal(D))


def check_scan_chunked():
    rng = np.random.default_rng(3)
    worst = 0.0
    for L in (1, 13, 64, 256):
        s = _random_scan(rng, L, 4, 3)
        y_ref, h_ref = ss.selective_scan_ref(s)
        for c in (1, 7, 32, L):
            y, h = ss.selective_scan_chunked(s, chunk_len=c)
            worst = max(worst, np.abs(y - y_ref).max(), np.abs(h - h_ref).max())
    return worst < 1e-10, f"max diff {worst:.2e}"


def check_scan_reduces_to_lti():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        L, N = 64, 5
        A = -rng.uniform(0.1, 2.0, N)
        B, C = rng.standard_normal(N), rng.standard_normal(N)
        delta = float(rng.uniform(0.05, 0.5))
        x = rng.standard_normal((L, 1))
        s = ss.SelectiveScanInput(x, np.full((L, 1), delta), np.tile(B, (L, 1)), np.tile(C, (L, 1)),
                                  A[None], np.zeros(1))
        y, _ = ss.selective_scan_ref(s)
        d = ssm_core.discretize_euler(ssm_core.SsmParams(A, B, C, delta))
        worst = max(worst, np.abs(y[:, 0] - ssm_core.ssm_recurrence(d, C, x[:, 0])).max())
    return worst < 1e-10, f"max diff {worst:.2e}"


def check_scan_gradients():
    rng = np.random.default_rng(5)
    s = _random_scan(rng, 8, 2, 3)
    names = ("x", "delta", "A", "B_t", "C_t", "D_skip")
    base = {k: getattr(s, k) for k in names}
    dy = rng.standard_normal(s.x.shape)
    worst = 0.0
    for target in names:
        def f(t, target=target):
            args = {k: Tensor(v) for k, v in base.items()}
            args[target] = t
            y = ss.selective_scan(args["x"], args["delta"], args["A"], args["B_t"], args["C_t"],
                                  args["D_skip"], chunk_len=3)
            return (y * dy).sum()
        worst = max(worst, grad_check(f, base[target]))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def _block_grad_error(bidirectional: bool) -> float:
    cfg = mb.MambaBlockConfig(d_m=8, E=3, d_state=4, bidirectional=bidirectional)
    w = {k: Tensor(v, requires_grad=True) for k, v in
         mb.init_block_weights(cfg, Rng(6), np.float64).items()}
    u = np.random.default_rng(6).standard_normal((6, 8))
    probe = np.random.default_rng(7).standard_normal((6, 8))
    errs = grad_check_params(lambda: (mb.block_forward(cfg, w, Tensor(u)) * probe).sum(), w,
                             max_coords=12, rng=Rng(6, 1))
    e_in = grad_check(lambda t: (mb.block_forward(cfg, w, t) * probe).sum(), u)
    return max(max(errs.values()), e_in)


def check_block_gradients():
    e = max(_block_grad_error(False), _block_grad_error(True))
    return e < 1e-4, f"max rel err {e:.2e}"


def check_model_gradients():
    cfg = model.ModelConfig(d_m=16, depth=2, block=dict(d_m=16, E=3, d_state=4), patch_t=2,
                            patch_f=4, input_frames=4, n_mels=16)
    w = model.init_weights(cfg, seed=8, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((cfg.n_patches, cfg.patch_dim))
    plan = model.build_mask_plan(Rng(8, 1), cfg.n_patches, 0.5)
    errs = grad_check_params(lambda: model.forward_pretrain(cfg, w, x, plan)[2], w.params,
                             max_coords=6, rng=Rng(8, 2))
    e = max(errs.values())
    return e < 1e-4, f"max rel err {e:.2e} over {len(errs)} tensors"


def check_vim_reduction():
    cfg_u = mb.MambaBlockConfig(d_m=8, d_state=4)
    cfg_b = mb.MambaBlockConfig(d_m=8, d_state=4, bidirectional=True)
    wb = mb.init_block_weights(cfg_b, Rng(9), np.float64)
    wb_zero = dict(wb)
    for k in mb.BRANCH_KEYS:
        wb_zero[mb.BACKWARD_PREFIX + k] = np.zeros_like(wb[mb.BACKWARD_PREFIX + k])
    u = Tensor(np.random.default_rng(9).standard_normal((10, 8)))
    y_b = mb.vim_block_forward(cfg_b, {k: Tensor(v) for k, v in wb_zero.items()}, u).data
    wu = {k: Tensor(v) for k, v in wb.items() if not k.startswith(mb.BACKWARD_PREFIX)}
    y_u = mb.mamba_block_forward(cfg_u, wu, u).data
    e = float(np.abs(y_b - y_u).max())
    return e < 1e-6, f"max diff {e:.2e}"


def check_geometry():
    mel = log_mel(Waveform(np.random.default_rng(10).uniform(-0.5, 0.5, 32000)))
    counts = {pt: patchify(mel, *pt).n_patches for pt in ((8, 16), (4, 16), (4, 8))}
    ok = mel.shape == (200, 80) and counts == {(8, 16): 125, (4, 16): 250, (4, 8): 500}
    return ok, f"spectrogram {mel.shape}, patches {list(counts.values())}"


def check_parameter_counts():
    targets = {"tiny": 4.8e6, "small": 17.9e6, "base": 69.3e6}
    detail, ok = [], True
    for name, target in targets.items():
        cfg = model.ModelConfig.preset(name)
        n = mb.count_parameters(cfg.block, cfg.depth, (cfg.patch_t, cfg.patch_f))
        ok &= abs(n / target - 1) <= 0.10
        ratio = mb.block_parameter_count(cfg.block) / (12 * cfg.d_m ** 2)
        ok &= abs(ratio - 1) <= 0.25
        detail.append(f"{name}={n / 1e6:.2f}M")
    return ok, ", ".join(detail)


def check_scoring():
    t = ev.ScoreTable(["a", "b"], ["A", "B"], [[10.0, 0.0], [0.0, 10.0]])
    e = max(abs(ev.aggregate_score(t, "A") - 50), abs(ev.aggregate_score(t, "B") - 50))
    t2 = ev.ScoreTable(["a", "b"], ["top", "low"], [[3.0, 9.0], [1.0, 2.0]])
    e = max(e, abs(ev.aggregate_score(t2, "top") - 100), abs(ev.aggregate_score(t2, "low")))
    return e < 1e-12, f"max err {e:.2e}"


def check_container_roundtrip():
    rng = np.random.default_rng(11)
    arrays = {"a": rng.standard_normal((3, 5)).astype(np.float32), "b": np.arange(7, dtype=np.int64),
              "c": rng.standard_normal(1)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.ssam"
        container.save_tensors(path, arrays, {"k": 1})
        back, meta = container.load_tensors(path)
    ok = meta == {"k": 1} and all(np.array_equal(arrays[k], back[k]) and arrays[k].dtype == back[k].dtype
                                  for k in arrays)
    return ok, "bit-exact" if ok else "mismatch"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "discretization.golden": check_zoh_golden,
    "discretization.dense_oracle": check_zoh_dense,
    "lti.recurrence_vs_convolution": check_lti_equivalence,
    "scan.chunked_vs_reference": check_scan_chunked,
    "scan.reduces_to_lti": check_scan_reduces_to_lti,
    "grad.selective_scan": check_scan_gradients,
    "grad.mamba_block": check_block_gradients,
    "grad.pretrain_loss": check_model_gradients,
    "block.vim_reduction": check_vim_reduction,
    "frontend.geometry": check_geometry,
    "model.parameter_counts": check_parameter_counts,
    "eval.scoring": check_scoring,
    "container.roundtrip": check_container_roundtrip,
}


def run_selftest(fault: str | None = None, emit=print) -> bool:
    """Run every check, emit one line each, and return True iff all pass."""
    all_ok = True
    with inject_fault(fault):
        for name, check in CHECKS.items():
            t0 = time.perf_counter()
            try:
                ok, detail = check()
            except Exception as exc:  # a crash is a failure, not an abort
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            all_ok &= bool(ok)
            emit(f"{'PASS' if ok else 'FAIL'}  {name:34s} {detail}  "
                 f"({time.perf_counter() - t0:.2f}s)")
    return all_ok
