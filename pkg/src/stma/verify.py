"""Oracle and property suite behind ``stma verify``.

Each check returns ``(passed, measured)``; :func:`verify_all` runs them all,
sorts the results by name and never raises. ``fault="mask"`` corrupts the
visibility mask handed to the decomposition oracle (test rows may see the
objects) and must make that check fail.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass

import numpy as np

from . import oracles
from .embedding import EmbedConfig, FeatureMap, Frame, StemWeights, conv_stem, embed, patchify, unpatchify
from .idassoc import ModelWeights, PipelineOptions, TargetMasks, affinity, initialize_memories, segment_frame
from .losses import bootstrapped_ce, combined_loss, dice_loss
from .memory import SpatialMemory, TemporalMemory
from .metrics import EvalRecord, contour_accuracy, region_similarity
from .stml import (
    ObjectFeatures,
    StmlState,
    StmlWeights,
    asymmetric_visibility,
    joint_attention_oracle,
    stml_block,
)
from .tensor import Tensor, add, layernorm, matmul, mul, reshape, softmax_rows, transpose, tsum

FAULTS = (None, "mask")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: str
    seconds: float


@dataclass
class Report:
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.measured}\t{r.seconds:.2f}s" for r in self.results
        ]

    def __str__(self):
        summary = f"{sum(r.passed for r in self.results)}/{len(self.results)} checks passed"
        return "\n".join(self.lines() + [summary])


# ---------------------------------------------------------------------------
# shared builders


def random_state(rng, N, C, m, n, grid=None) -> StmlState:
    gh, gw = grid or (1, N)
    fm = lambda: FeatureMap(Tensor(rng.normal(size=(N, C))), gh, gw)  # noqa: E731
    objects = ObjectFeatures(Tensor(rng.normal(size=(n, C)))) if n else None
    return StmlState(fm(), [fm() for _ in range(m)], objects)


def random_weights(rng, C, heads) -> StmlWeights:
    w = StmlWeights.create(C, heads, rng=rng)
    # non-trivial layernorm affine so its gradient paths are exercised
    return w.replace(
        ln1_gamma=Tensor(1 + 0.1 * rng.normal(size=C)), ln1_beta=Tensor(0.1 * rng.normal(size=C)),
        ln2_gamma=Tensor(1 + 0.1 * rng.normal(size=C)), ln2_beta=Tensor(0.1 * rng.normal(size=C)),
        ff1_bias=Tensor(0.1 * rng.normal(size=w.ff1_bias.shape)), ff2_bias=Tensor(0.1 * rng.normal(size=C)),
    )


def streams(state: StmlState) -> list[np.ndarray]:
    out = [state.test.tokens.numpy()] + [r.tokens.numpy() for r in state.references]
    if state.objects is not None:
        out.append(state.objects.vectors.numpy())
    return out


def max_diff(a: StmlState, b: StmlState) -> float:
    return max(float(np.abs(x - y).max()) for x, y in zip(streams(a), streams(b)))


def random_config(rng):
    return dict(
        N=int(rng.integers(1, 17)), m=int(rng.integers(1, 4)), n=int(rng.integers(1, 4)),
        heads=int(rng.choice([1, 2, 4])),
    )


# ---------------------------------------------------------------------------
# checks


def check_decomposition(seed=0, trials=50, fault=None):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = random_config(rng)
        C = 4 * int(rng.integers(1, 5))
        state = random_state(rng, cfg["N"], C, cfg["m"], cfg["n"])
        w = random_weights(rng, C, cfg["heads"])
        vis = asymmetric_visibility(cfg["n"], cfg["m"], cfg["N"])
        if fault == "mask":
            vis[-cfg["N"]:, :cfg["n"]] = True
        worst = max(worst, max_diff(stml_block(state, w), joint_attention_oracle(state, w, vis)))
    return worst < 1e-10, f"max|d|={worst:.3e} over {trials} configs"


def check_isolation(seed=1, trials=20):
    rng = np.random.default_rng(seed)
    leaks = 0.0
    for _ in range(trials):
        N, C, m, n = int(rng.integers(1, 9)), 8, 3, 2
        state = random_state(rng, N, C, m, n)
        w = random_weights(rng, C, 2)
        base = stml_block(state, w)
        j = int(rng.integers(m))
        refs = list(state.references)
        refs[j] = refs[j].with_tokens(Tensor(rng.normal(size=(N, C))))
        out = stml_block(StmlState(state.test, refs, state.objects), w)
        for i in range(m):
            if i != j:
                leaks = max(leaks, float(np.abs(out.references[i].tokens.numpy() - base.references[i].tokens.numpy()).max()))
        new_test = state.test.with_tokens(Tensor(rng.normal(size=(N, C))))
        out = stml_block(StmlState(new_test, state.references, state.objects), w)
        for a, b in zip(streams(out)[1:], streams(base)[1:]):
            leaks = max(leaks, float(np.abs(a - b).max()))
    return leaks == 0.0, f"max leak={leaks:.1e} over {trials} trials"


def check_no_object_mask(seed=2, trials=20):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = random_config(rng)
        state = random_state(rng, cfg["N"], 8, cfg["m"], cfg["n"])
        w = random_weights(rng, 8, cfg["heads"])
        got = stml_block(state, w, mode="no_object")
        want = joint_attention_oracle(state, w, asymmetric_visibility(cfg["n"], cfg["m"], cfg["N"], objects_to_refs=False))
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(streams(got)[:-1], streams(want)[:-1])))
    return worst < 1e-10, f"max|d|={worst:.3e}"


def stml_loss_builder(rng, N, C, m, n, heads):
    w = random_weights(rng, C, heads)
    names = list(w.tensors())
    arrays = [rng.normal(size=(N, C)) for _ in range(m + 1)] + [rng.normal(size=(n, C))]
    arrays += [t.numpy() for t in w.tensors().values()]
    probes = [Tensor(rng.normal(size=(N, C))) for _ in range(m + 1)] + [Tensor(rng.normal(size=(n, C)))]

    def loss(ts):
        ww = w.replace(**dict(zip(names, ts[m + 2:])))
        state = StmlState(FeatureMap(ts[0], 1, N), [FeatureMap(t, 1, N) for t in ts[1:m + 1]], ObjectFeatures(ts[m + 1]))
        out = stml_block(state, ww)
        outs = [out.test.tokens, *(r.tokens for r in out.references), out.objects.vectors]
        total = tsum(mul(outs[0], probes[0]))
        for x, p in zip(outs[1:], probes[1:]):
            total = add(total, tsum(mul(x, p)))
        return total

    return loss, arrays


def check_grad_stml(seed=3):
    rng = np.random.default_rng(seed)
    loss, arrays = stml_loss_builder(rng, N=4, C=8, m=2, n=2, heads=2)
    err = oracles.gradient_check(loss, arrays, n_probes=32, rng=seed)
    return err < 1e-5, f"max rel err={err:.2e} at 32 coords"


def check_grad_primitives(seed=4):
    rng = np.random.default_rng(seed)
    A, B, W = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    g, b = 1 + 0.1 * rng.normal(size=4), rng.normal(size=4)
    cases = {
        "matmul": (lambda t: tsum(mul(matmul(t[0], t[1]), Tensor(W))), [A, B]),
        "softmax": (lambda t: tsum(mul(softmax_rows(t[0]), Tensor(W))), [W * 3]),
        "layernorm": (lambda t: tsum(mul(layernorm(t[0], t[1], t[2]), Tensor(W))), [W, g, b]),
        "transpose": (lambda t: tsum(mul(transpose(t[0]), Tensor(W.T))), [rng.normal(size=(5, 4))]),
    }
    errs = {k: oracles.gradient_check(f, arrs, 16, rng=seed) for k, (f, arrs) in cases.items()}
    worst = max(errs.values())
    return worst < 1e-6, " ".join(f"{k}={v:.1e}" for k, v in errs.items())


def _class_probs(logits: Tensor, n_cls, H, W) -> Tensor:
    flat = transpose(reshape(logits, (n_cls, H * W)))
    return reshape(transpose(softmax_rows(flat)), (n_cls, H, W))


def check_grad_losses(seed=5):
    rng = np.random.default_rng(seed)
    H = W = 8
    gt = rng.integers(0, 3, size=(H, W))
    logits = rng.normal(size=(3, H, W))
    p = rng.uniform(0.05, 0.95, size=(H, W))
    errs = {
        "dice": oracles.gradient_check(lambda t: dice_loss(t[0], gt == 1), [p], 32, rng=seed),
        "bce": oracles.gradient_check(lambda t: bootstrapped_ce(_class_probs(t[0], 3, H, W), gt, 0.25), [logits], 32, rng=seed),
        "combined": oracles.gradient_check(lambda t: combined_loss(_class_probs(t[0], 3, H, W), gt), [logits], 32, rng=seed),
    }
    worst = max(errs.values())
    return worst < 1e-5, " ".join(f"{k}={v:.1e}" for k, v in errs.items())


def check_matmul(seed=6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        M, K, N = (int(x) for x in rng.integers(1, 17, size=3))
        a, b = rng.normal(size=(M, K)), rng.normal(size=(K, N))
        worst = max(worst, float(np.abs(matmul(Tensor(a), Tensor(b)).numpy() - oracles.naive_matmul(a, b)).max()))
    return worst < 1e-12, f"max|d|={worst:.1e}"


def check_softmax(seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=50, size=(16, 16))
    s = softmax_rows(Tensor(x)).numpy()
    shift = softmax_rows(Tensor(x + rng.normal(size=(16, 1)) * 100)).numpy()
    row_err = float(np.abs(s.sum(axis=1) - 1).max())
    shift_err = float(np.abs(s - shift).max())
    return row_err < 1e-12 and shift_err < 1e-12 and (s >= 0).all(), f"row sum err={row_err:.1e} shift err={shift_err:.1e}"


def check_lfu(seed=8, ops=1000, capacity=8):
    rng = np.random.default_rng(seed)
    mem, ref = TemporalMemory(capacity), oracles.HeapLFU(capacity)
    key, vals = Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1, 1)))
    got, idx = [], 0
    for _ in range(ops):
        if not len(mem) or rng.random() < 0.4:
            ev = mem.insert(key, vals, idx)
            ref.insert(idx)
            got.append(ev.frame_idx if ev else None)
            if ev is not None and got[-1] != ref.evictions[-1]:
                break
            idx += 1
        else:
            target = mem.indices()[int(rng.integers(len(mem)))]
            amount = float(rng.integers(0, 4)) if rng.random() < 0.5 else float(rng.random())
            mem.touch_entry(target, amount)
            ref.touch(target, amount)
        if len(mem) > capacity:
            return False, "capacity exceeded"
    ours = [e for e in got if e is not None]
    return ours == ref.evictions, f"{len(ours)} evictions, reference {len(ref.evictions)}"


def check_spatial_pin(inserts=100_000, capacity=4):
    mem = SpatialMemory(capacity, 3)
    for i in range(inserts):
        mem.insert(i, None)
        if mem.indices()[0] != 0 or len(mem) > capacity:
            return False, f"invariant broken at insert {i}"
    last = [i for i in range(inserts) if i % 3 == 0][-(capacity - 1):]
    return mem.indices() == [0, *last], f"final={mem.indices()}"


def check_metrics():
    sq = np.zeros((30, 30), dtype=int)
    sq[5:15, 5:15] = 1
    shifted = np.zeros_like(sq)
    shifted[5:15, 10:20] = 1
    other = np.zeros_like(sq)
    other[20:25, 20:25] = 1
    empty = np.zeros_like(sq)
    vals = {
        "J_same": region_similarity(sq, sq, 1) == 1.0,
        "F_same": contour_accuracy(sq, sq, 1) == 1.0,
        "J_disjoint": region_similarity(sq, other, 1) == 0.0,
        "F_empty": contour_accuracy(empty, sq, 1) == 0.0,
        "J_third": region_similarity(sq, shifted, 1) == 1 / 3,
    }
    rec = EvalRecord().add(0, sq, shifted, 1).add(1, sq, sq, 1)
    vals["JF_mean"] = rec.JF == (np.mean(list(rec.J.values())) + np.mean(list(rec.F.values()))) / 2
    bad = [k for k, ok in vals.items() if not ok]
    return not bad, "all identities exact" if not bad else f"failed: {bad}"


def check_contour_oracle(seed=9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    sq = np.zeros((24, 24), dtype=int)
    sq[6:16, 6:16] = 1
    dil = np.zeros_like(sq)
    dil[5:17, 5:17] = 1
    pairs = [(sq, dil, 1.0)]
    for _ in range(5):
        a = (rng.random((20, 20)) < 0.3).astype(int)
        b = (rng.random((20, 20)) < 0.3).astype(int)
        pairs.append((a, b, float(rng.integers(1, 4))))
    for a, b, tol in pairs:
        worst = max(worst, abs(contour_accuracy(a, b, 1, tol) - oracles.exhaustive_boundary_f(a, b, tol)))
    return worst < 1e-12, f"max|d|={worst:.1e}"


def check_patchify(seed=10):
    rng = np.random.default_rng(seed)
    frame = Frame(rng.random((3, 64, 64)))
    back = unpatchify(patchify(frame, 16), 64, 64, 16)
    cfg = EmbedConfig.create(64, 64, rng=rng)
    tokens = embed(frame, cfg).tokens.numpy()
    two_step = patchify(frame, 16).numpy() @ cfg.projection.numpy() + cfg.positional.numpy()
    ok = np.array_equal(back.pixels, frame.pixels) and np.array_equal(tokens, two_step)
    return ok, "round trip and two-step embed bit-exact" if ok else "mismatch"


def check_conv_stem(seed=11):
    rng = np.random.default_rng(seed)
    w = StemWeights.create(8, 8, rng)
    x = rng.random((3, 16, 16))
    skips = conv_stem(Frame(x), w)
    a = np.maximum(oracles.direct_conv2d(x, w.w1, w.b1, 2, 1), 0)
    q = oracles.direct_conv2d(a, w.w2, w.b2, 2, 1)
    e = oracles.direct_conv2d(np.maximum(q, 0), w.w3, w.b3, 2, 1)
    d = max(float(np.abs(skips.quarter_grid() - q).max()), float(np.abs(skips.eighth_grid() - e).max()))
    return d < 1e-10, f"max|d|={d:.1e}"


def check_affinity(seed=12):
    rng = np.random.default_rng(seed)
    N, C, T = 6, 8, 3
    mem = TemporalMemory(T)
    for t in range(T):
        mem.insert(Tensor(rng.normal(size=(N, C))), Tensor(rng.normal(size=(2, N, 4))), t)
    q = rng.normal(size=(N, C))
    aff, usage = affinity(FeatureMap(Tensor(q), 1, N), mem)
    keys = [row for e in mem.entries for row in e.key.numpy()]
    worst = 0.0
    for i in range(N):
        logits = [float(np.dot(q[i], k)) / math.sqrt(C) for k in keys]
        top = max(logits)
        z = sum(math.exp(v - top) for v in logits)
        worst = max(worst, max(abs(math.exp(v - top) / z - a) for v, a in zip(logits, aff.weights.numpy()[i])))
    mass_err = abs(sum(usage.increments) - N)
    return worst < 1e-10 and mass_err < 1e-9, f"max|d|={worst:.1e} mass err={mass_err:.1e}"


def _pipeline(seq, opts=PipelineOptions(), weights=None, seed=0, spatial_capacity=4, temporal_capacity=8):
    H, W = seq.frames[0].height, seq.frames[0].width
    weights = weights or ModelWeights.create(H, W, rng=seed)
    spatial, temporal = SpatialMemory(spatial_capacity, 3), TemporalMemory(temporal_capacity)
    initialize_memories(seq.frames[0], seq.masks[0], weights, spatial, temporal, opts)
    return weights, spatial, temporal


def check_memory_audit(seed=13, length=20):
    from .synthetic import generate_sequence

    seq = generate_sequence(seed, length, 2)
    weights, spatial, temporal = _pipeline(seq, seed=seed)
    for k in range(1, length):
        res = segment_frame(seq.frames[k], k, spatial, temporal, weights)
        ids = res.masks.ids
        if ids.min() < 0 or ids.max() > 2:
            return False, f"invalid IDs at frame {k}"
        if len(spatial) > 4 or len(temporal) > 8 or spatial.indices()[0] != 0 or 0 not in temporal.indices():
            return False, f"memory invariant broken at frame {k}"
    return True, f"{length} frames, spatial={spatial.indices()} temporal={temporal.indices()}"


def check_equivariance(seed=14, length=10):
    from .synthetic import generate_sequence

    seq = generate_sequence(seed, length, 3)
    perm = np.array([0, 2, 3, 1])  # old ID -> new ID
    weights = ModelWeights.create(64, 64, rng=seed)
    a = _pipeline(seq, weights=weights)
    permuted = type(seq)(seq.frames, [TargetMasks(perm[m.ids], 3) for m in seq.masks], seq.seed, seq.targets)
    b = _pipeline(permuted, weights=weights)
    for k in range(1, length):
        ra = segment_frame(seq.frames[k], k, *a[1:], weights)
        rb = segment_frame(seq.frames[k], k, *b[1:], weights)
        if not np.array_equal(perm[ra.masks.ids], rb.masks.ids):
            return False, f"ID planes differ at frame {k}"
        if not np.array_equal(ra.logits, rb.logits[perm[1:] - 1]):
            return False, f"logits are not an exact permutation at frame {k}"
    return True, f"{length} frames, 3 targets, permutation {perm[1:].tolist()}"


CHECKS = {
    "affinity_bruteforce": check_affinity,
    "contour_exhaustive_oracle": check_contour_oracle,
    "conv_stem_direct_oracle": check_conv_stem,
    "decomposition_equivalence": check_decomposition,
    "equivariance_pipeline": check_equivariance,
    "gradcheck_losses": check_grad_losses,
    "gradcheck_primitives": check_grad_primitives,
    "gradcheck_stml_block": check_grad_stml,
    "isolation_direction": check_isolation,
    "lfu_reference_simulator": check_lfu,
    "matmul_naive_oracle": check_matmul,
    "memory_trace_audit": check_memory_audit,
    "metric_identities": check_metrics,
    "no_object_masking_oracle": check_no_object_mask,
    "patchify_embed_roundtrip": check_patchify,
    "softmax_normalization": check_softmax,
    "spatial_pin_persistence": check_spatial_pin,
}


def verify_all(fault=None, only=None) -> Report:
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    results = []
    for name in sorted(CHECKS):
        if only and name not in only:
            continue
        fn = CHECKS[name]
        start = time.perf_counter()
        try:
            ok, measured = fn(fault=fault) if name == "decomposition_equivalence" else fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, measured = False, f"error: {exc!r} {traceback.format_exc(limit=1).splitlines()[-1]}"
        results.append(CheckResult(name, bool(ok), measured, time.perf_counter() - start))
    return Report(results)
