"""Invariant suites behind ``selfcheck`` and the first seven acceptance criteria.

Each suite compares the library against an independent oracle (numpy float64
re-implementations, closed forms, or direct row assembly) and returns a Report.
"""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from . import container
from .backbone import Backbone, BackboneConfig
from .bank import ConceptBank, ConceptRecord, CorruptionError, VersionError
from .customization import ConceptSpec, FinetuneConfig, _conditioning, finetune_concept, init_state
from .data import DEFAULT_CONCEPTS, make_vocabulary
from .denoiser import Denoiser, _alpha_bar_table, schedule
from .report import Report, timed
from .sampler import (BlendPlan, GuidanceConfig, SamplerConfig, blend_multi, guidance_terms,
                      guided_eps, aggregate_maps, overlap, run_loop)
from .text import LatentTextualFeature, TemplatePool, TokenizedPrompt

# frozen closed-form values of the cosine schedule (T=100, s=0.008), evaluated
# independently at 30 significant digits
SCHEDULE_ORACLE = {
    0: (1.0, 0.0),
    50: (0.70274005894116902358, 0.71144670184024487238),
    99: (0.015583877179155565661, 0.99987856401268298936),
}


# -- 1: random-graph gradient check ---------------------------------------------------

def _np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _np_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


_erf = np.vectorize(math.erf)

# name -> (torch op on one node, numpy op); ``p`` carries op-specific constants
_UNARY = {
    "silu": (lambda x, p: ad.silu(x), lambda x, p: x / (1 + np.exp(-x))),
    "gelu": (lambda x, p: ad.gelu(x), lambda x, p: 0.5 * x * (1 + _erf(x / math.sqrt(2)))),
    "softmax": (lambda x, p: ad.softmax_rows(x), lambda x, p: _np_softmax(x)),
    "layer_norm": (lambda x, p: ad.layer_norm(x), lambda x, p: _np_layer_norm(x)),
    "transpose": (lambda x, p: ad.transpose(x), lambda x, p: x.swapaxes(-1, -2)),
    "scale": (lambda x, p: ad.scale(x, p["c"]), lambda x, p: x * p["c"]),
    "gather": (lambda x, p: ad.gather_rows(x, p["idx"]), lambda x, p: x[p["idx"]]),
    "embedding": (lambda x, p: ad.embedding(torch.tensor(p["idx"]), x), lambda x, p: x[p["idx"]]),
    "reshape": (lambda x, p: ad.reshape(x, p["shape"]), lambda x, p: x.reshape(p["shape"])),
    "row_sum": (lambda x, p: ad.sum(x, dim=-1, keepdim=True), lambda x, p: x.sum(-1, keepdims=True)),
    "row_mean": (lambda x, p: ad.mean(x, dim=-1, keepdim=True), lambda x, p: x.mean(-1, keepdims=True)),
}
_BINARY = {
    "add": (lambda a, b, p: ad.add(a, b), lambda a, b, p: a + b),
    "mul": (lambda a, b, p: ad.mul(a, b), lambda a, b, p: a * b),
    "minimum": (lambda a, b, p: ad.minimum(a, b), lambda a, b, p: np.minimum(a, b)),
    "matmul": (lambda a, b, p: ad.matmul(a, b), lambda a, b, p: a @ b),
    "scatter": (lambda a, b, p: ad.scatter_rows(a, p["idx"], b), None),
}


def _np_scatter(a, b, p):
    out = a.copy()
    out[p["idx"]] = b
    return out


def random_graph(rng: np.random.Generator, n_ops: int | None = None):
    """A random program over the closed op set.

    Returns (leaf arrays, program, output weights). Program entries are
    (op, input node ids, params); a ("leaf", [k], {}) entry introduces leaf k,
    so node ids count leaves and op results in program order.
    """
    leaves: list[np.ndarray] = []
    shapes: list[tuple[int, int]] = []
    prog = []

    def leaf(shape):
        leaves.append(rng.normal(size=shape))
        shapes.append(tuple(shape))
        prog.append(("leaf", [len(leaves) - 1], {}))
        return len(shapes) - 1

    leaf((int(rng.integers(2, 5)), int(rng.integers(2, 5))))

    for _ in range(n_ops or int(rng.integers(3, 8))):
        src = int(rng.integers(len(shapes)))
        m, n = shapes[src]
        kind = rng.choice(list(_UNARY) + list(_BINARY))
        p: dict = {}
        if kind in _UNARY:
            if kind == "scale":
                p["c"] = float(rng.uniform(-2, 2))
            elif kind in ("gather", "embedding"):
                p["idx"] = rng.integers(m, size=int(rng.integers(1, 5))).tolist()
                if kind == "gather":
                    p["idx"] = sorted(set(p["idx"]))
            elif kind == "reshape":
                p["shape"] = (n, m)
            ins = [src]
            out = {"transpose": (n, m), "reshape": (n, m), "row_sum": (m, 1), "row_mean": (m, 1),
                   "gather": (len(p.get("idx", [])), n), "embedding": (len(p.get("idx", [])), n)}.get(kind, (m, n))
        elif kind == "matmul":
            other = leaf((n, int(rng.integers(2, 5))))
            ins, out = [src, other], (m, shapes[other][1])
        elif kind == "scatter":
            idx = sorted(rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False).tolist())
            p["idx"] = idx
            other = leaf((len(idx), n))
            ins, out = [src, other], (m, n)
        else:
            same = [i for i, s in enumerate(shapes) if s == (m, n) and i != src]
            other = int(rng.choice(same)) if same and rng.random() < 0.5 else leaf((m, n))
            ins, out = [src, other], (m, n)
        prog.append((str(kind), ins, p))
        shapes.append(out)
    weights = rng.normal(size=shapes[-1])
    return leaves, prog, weights


def eval_graph_torch(leaves, prog, weights):
    nodes = []
    for kind, ins, p in prog:
        if kind == "leaf":
            nodes.append(leaves[ins[0]])
        elif kind in _UNARY:
            nodes.append(_UNARY[kind][0](nodes[ins[0]], p))
        else:
            nodes.append(_BINARY[kind][0](nodes[ins[0]], nodes[ins[1]], p))
    return ad.sum(ad.mul(nodes[-1], torch.as_tensor(weights, dtype=nodes[-1].dtype)))


def eval_graph_numpy(leaves, prog, weights) -> float:
    nodes = []
    for kind, ins, p in prog:
        if kind == "leaf":
            nodes.append(leaves[ins[0]])
        elif kind in _UNARY:
            nodes.append(_UNARY[kind][1](nodes[ins[0]], p))
        elif kind == "scatter":
            nodes.append(_np_scatter(nodes[ins[0]], nodes[ins[1]], p))
        else:
            nodes.append(_BINARY[kind][1](nodes[ins[0]], nodes[ins[1]], p))
    return float((nodes[-1] * weights).sum())


def gradcheck_graph(rng: np.random.Generator) -> float:
    """Relative error of reverse-mode gradients against numpy finite differences.

    Both paths run in float64; the error is scaled by the largest true
    gradient entry over all leaves (floored at 1e-3, for graphs whose output
    is constant in some input).
    """
    leaves, prog, weights = random_graph(rng)
    ts = [ad.tensor(x, requires_grad=True, dtype=torch.float64) for x in leaves]
    ad.backward(eval_graph_torch(ts, prog, weights))
    got = [t.grad.numpy() if t.grad is not None else np.zeros_like(x) for t, x in zip(ts, leaves)]
    want = ad.numerical_grad(lambda xs: eval_graph_numpy(xs, prog, weights), [x.copy() for x in leaves], eps=1e-6)
    scale = max(max(float(np.abs(w).max()) for w in want), 1e-3)
    return max(float(np.abs(g - w).max()) for g, w in zip(got, want)) / scale


@timed
def check_autodiff(n_graphs: int = 100, tol: float = 1e-4, seed: int = 0) -> Report:
    rng = np.random.default_rng(seed)
    errs = [gradcheck_graph(rng) for _ in range(n_graphs)]
    worst = max(errs)
    return Report("autodiff", worst <= tol, f"{n_graphs} random graphs, worst relative error {worst:.2e} (<= {tol})",
                  {"errors": errs})


# -- 2: schedule ---------------------------------------------------------------------

@timed
def check_schedule(T: int = 100, tol: float = 1e-6) -> Report:
    worst = max(abs(a * a + s * s - 1) for a, s, _ in (schedule(t, T) for t in range(T)))
    boundary = []
    for t, (a_want, s_want) in SCHEDULE_ORACLE.items():
        a, s, w = schedule(t, T)
        boundary.append(abs(a - a_want) <= 1e-12 and abs(s - s_want) <= 1e-9 and w == 1.0)
    raised = []
    for bad in (-1, T):
        try:
            schedule(bad, T)
            raised.append(False)
        except IndexError:
            raised.append(True)
    monotone = all(x > y for x, y in zip(_alpha_bar_table(T, 0.008), _alpha_bar_table(T, 0.008)[1:]))
    ok = worst <= tol and all(boundary) and all(raised) and monotone
    return Report("schedule", ok, f"max |a^2+s^2-1| = {worst:.1e}; boundaries {'ok' if all(boundary) else 'WRONG'}; "
                  f"range errors {'ok' if all(raised) else 'missing'}",
                  {"identity_error": worst, "boundary": boundary, "range_errors": raised, "monotone": monotone})


# -- 3: blend exactness ----------------------------------------------------------------

def random_blend_instance(rng: np.random.Generator, n_concepts: int, batch: int = 2, layers: int = 4,
                          m: int = 16, d: int = 8):
    h = LatentTextualFeature(torch.from_numpy(rng.normal(size=(batch, layers, m, d)).astype(np.float32)),
                             torch.from_numpy(rng.normal(size=(batch, layers, m, d)).astype(np.float32)))
    starts = sorted(rng.choice(np.arange(1, m - 1, 2), size=n_concepts, replace=False).tolist())
    entries, records = [], []
    for i, s in enumerate(starts):
        rows = rng.normal(size=(layers, 2, 2, d)).astype(np.float32)
        records.append(ConceptRecord(f"c{i}", f"V{i + 1}*", "circle", rows))
        entries.append((f"c{i}", (s, s + 1)))
    tp = TokenizedPrompt(tuple(range(m)), tuple(str(i) for i in range(m)), {})
    return h, BlendPlan("", tp, entries, records)


def row_assembly_oracle(h: LatentTextualFeature, plan: BlendPlan) -> tuple[np.ndarray, np.ndarray]:
    K, V = h.K.numpy().copy(), h.V.numpy().copy()
    for (_, (a, n)), rec in zip(plan.entries, plan.records):
        for b in range(K.shape[0]):
            for l in range(K.shape[1]):
                K[b, l, a], K[b, l, n] = rec.rows[l, 0, 0], rec.rows[l, 0, 1]
                V[b, l, a], V[b, l, n] = rec.rows[l, 1, 0], rec.rows[l, 1, 1]
    return K, V


@timed
def check_blend(n_instances: int = 200, seed: int = 0) -> Report:
    rng = np.random.default_rng(seed)
    bad = {"oracle": 0, "non_span": 0, "permutation": 0}
    for _ in range(n_instances):
        h, plan = random_blend_instance(rng, int(rng.integers(0, 6)))
        out = blend_multi(h, plan)
        K, V = row_assembly_oracle(h, plan)
        if not (np.array_equal(out.K.numpy(), K) and np.array_equal(out.V.numpy(), V)):
            bad["oracle"] += 1
        span = {p for _, s in plan.entries for p in s}
        keep = [i for i in range(h.K.shape[2]) if i not in span]
        if not (torch.equal(out.K[:, :, keep], h.K[:, :, keep]) and torch.equal(out.V[:, :, keep], h.V[:, :, keep])):
            bad["non_span"] += 1
        perm = rng.permutation(len(plan.entries))
        shuffled = BlendPlan("", plan.tokens, [plan.entries[i] for i in perm], [plan.records[i] for i in perm])
        out2 = blend_multi(h, shuffled)
        if not (torch.equal(out.K, out2.K) and torch.equal(out.V, out2.V)):
            bad["permutation"] += 1
    ok = not any(bad.values())
    return Report("blend", ok, f"{n_instances} instances, mismatches {bad}", bad)


# -- 4: gradient routing ------------------------------------------------------------------

def small_backbone(seed: int = 0) -> Backbone:
    return Backbone(make_vocabulary(), BackboneConfig(d_t=32, d_l=32, widths=(16, 32)), seed=seed)


@timed
def check_routing(steps: int = 20, seed: int = 0) -> Report:
    bb = small_backbone(seed)
    with torch.no_grad():  # the zero-initialized output layer would block all gradient
        bb.denoiser.outc.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(seed))
    before = {k: v.clone() for k, v in bb.state_tensors().items()}
    rng = np.random.default_rng(seed)
    concept = DEFAULT_CONCEPTS[0]
    refs = rng.uniform(-1, 1, size=(4, 3, 32, 32)).astype(np.float32)
    priors = rng.uniform(-1, 1, size=(8, 3, 32, 32)).astype(np.float32)
    spec = ConceptSpec(concept, refs)
    cfg = FinetuneConfig(steps=steps, batch=2, prior_batch=2, seed=seed)
    state = finetune_concept(bb, spec, priors, cfg)
    after = bb.state_tensors()
    changed = [k for k in before if not torch.equal(before[k], after[k])]
    moved = not torch.equal(state.projections.w_k, before["projections.w_k"])

    # perturb the learnable parameters; only concept rows of the blended conditioning may move
    pool = TemplatePool()
    base = init_state(bb, spec, cfg)
    pert = init_state(bb, spec, cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        pert.embedding += 0.1 * torch.randn(pert.embedding.shape, generator=g)
        pert.projections.w_k += 0.1 * torch.randn(pert.projections.w_k.shape, generator=g)
        pert.projections.w_v += 0.1 * torch.randn(pert.projections.w_v.shape, generator=g)
        h0 = _conditioning(bb, base, spec, cfg, pool, np.random.default_rng(7), 6)
        h1 = _conditioning(bb, pert, spec, cfg, pool, np.random.default_rng(7), 6)
    leaks, hits = 0, 0
    for i, tp in enumerate(h0.prompts):
        span = set(tp.subject(concept.noun))
        diff = ((h0.K[i] != h1.K[i]) | (h0.V[i] != h1.V[i])).any(dim=-1).any(dim=0)  # [M]
        rows = set(torch.nonzero(diff).flatten().tolist())
        leaks += len(rows - span)
        hits += rows == span
    ok = not changed and moved and leaks == 0 and hits == len(h0.prompts)
    return Report("routing", ok, f"frozen tensors changed: {len(changed)}; off-span rows moved: {leaks}; "
                  f"span rows moved in {hits}/{len(h0.prompts)} prompts",
                  {"changed": changed, "leaks": leaks, "learnable_moved": moved})


# -- 5: guidance math --------------------------------------------------------------------------

def _overlap_scalar(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a / a.sum(), b / b.sum()
    return float(sum(min(x, y) for x, y in zip(a.ravel(), b.ravel())))


def guidance_oracle(maps: np.ndarray, token_sets) -> tuple[float, float]:
    """Scalar evaluation of the binding and separation terms for one image."""
    n = len(token_sets)
    g1 = -sum(_overlap_scalar(maps[v], maps[k]) for v, k in token_sets)
    g2 = 0.0
    for i, (v, k) in enumerate(token_sets):
        for j, other in enumerate(token_sets):
            if j != i:
                for tok in other:
                    g2 += _overlap_scalar(maps[v], maps[tok]) + _overlap_scalar(maps[tok], maps[k])
    return g1, (g2 / (2 * n) if n else 0.0)


def small_denoiser(seed: int = 0, dtype=torch.float64) -> Denoiser:
    torch.manual_seed(seed)
    m = Denoiser(3, (8, 16), d_l=16, heads=2, T=100).to(dtype)
    for p in m.parameters():
        p.requires_grad_(False)
    return m.eval()


@timed
def check_guidance(seed: int = 0, tol: float = 1e-3) -> Report:
    rng = np.random.default_rng(seed)
    results = {}
    a = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    b = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    results["anchor_half"] = float(overlap(a, b)) == 0.5
    results["anchor_identical"] = float(overlap(a, 3 * a)) == 1.0
    results["anchor_disjoint"] = float(overlap(a, 1 - a)) == 0.0
    maps = torch.from_numpy(rng.uniform(0.01, 1, size=(1, 8, 4, 4)))
    g1, g2 = guidance_terms(maps, [(1, 2)])
    results["single_concept_g2_zero"] = float(g2[0]) == 0.0 and float(g1[0]) <= 0
    sets = [(1, 2), (4, 5)]
    g1, g2 = guidance_terms(maps, sets)
    o1, o2 = guidance_oracle(maps[0].numpy(), sets)
    results["two_concept_oracle"] = abs(float(g1[0]) - o1) < 1e-12 and abs(float(g2[0]) - o2) < 1e-12
    ovs = [float(overlap(maps[0, i], maps[0, j])) for i in range(8) for j in range(8)]
    results["overlap_bounded"] = all(-1e-12 <= o <= 1 + 1e-12 for o in ovs)

    # gradient of g1 + g2 w.r.t. an 8x8 latent, float64 end to end
    model = small_denoiser(seed)
    K = torch.from_numpy(rng.normal(size=(1, 4, 8, 16)))
    V = torch.from_numpy(rng.normal(size=(1, 4, 8, 16)))
    h = LatentTextualFeature(K, V)
    t = torch.tensor([60])
    z = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))

    def energy(z_np: np.ndarray) -> float:
        with torch.no_grad():
            out = model(torch.from_numpy(z_np), t, K, V, capture=True)
            e1, e2 = guidance_terms(aggregate_maps(out.attn), sets)
        return float((e1 + e2).sum())

    zg = z.clone().requires_grad_(True)
    out = model(zg, t, K, V, capture=True)
    e1, e2 = guidance_terms(aggregate_maps(out.attn), sets)
    grad = torch.autograd.grad((e1 + e2).sum(), zg)[0].numpy()
    fd = ad.numerical_grad(lambda xs: energy(xs[0]), [z.numpy().copy()], eps=1e-6)[0]
    rel = ad.relative_error(grad, fd)
    results["gradient_fd"] = rel <= tol

    g0 = GuidanceConfig(scale=0.0)
    zf = z.float()
    model32 = small_denoiser(seed, torch.float32)
    hf = LatentTextualFeature(K.float(), V.float())
    with torch.no_grad():
        plain = model32(zf, t, hf.K, hf.V).eps_hat
    results["lambda_zero_exact"] = torch.equal(guided_eps(model32, zf, t, hf, sets, g0), plain)
    outside = GuidanceConfig(scale=1.0, t_hi=99, t_lo=80)
    results["window_exact"] = torch.equal(guided_eps(model32, zf, t, hf, sets, outside), plain)
    ok = all(results.values())
    return Report("guidance", ok, f"gradient rel. error {rel:.1e} (<= {tol}); failed: "
                  f"{[k for k, v in results.items() if not v] or 'none'}", {**results, "fd_error": rel})


# -- 6: sampler contracts -------------------------------------------------------------------------

def gaussian_eps(data_std: float, T: int):
    """Exact noise prediction for N(0, data_std^2) data: E[eps | z_t]."""
    table = _alpha_bar_table(T, 0.008)

    def fn(z, t, i):
        ab = table[t]
        return math.sqrt(1 - ab) * z / (ab * data_std ** 2 + 1 - ab), {}
    return fn


@timed
def check_sampler(seed: int = 0) -> Report:
    results = {}
    model = small_denoiser(seed, torch.float32)
    torch.manual_seed(seed)
    for p in model.outc.parameters():
        p.copy_(torch.randn(p.shape) * 0.05)
    rng = np.random.default_rng(seed)
    h = LatentTextualFeature(torch.from_numpy(rng.normal(size=(1, 4, 8, 16)).astype(np.float32)),
                             torch.from_numpy(rng.normal(size=(1, 4, 8, 16)).astype(np.float32)))
    from .sampler import sample_with
    scfg = SamplerConfig(steps=20, cfg_scale=3.0)
    r1 = sample_with(model, h, h, [3, 4], scfg, shape=(3, 8, 8))
    r2 = sample_with(model, h, h, [3, 4], scfg, shape=(3, 8, 8))
    results["ddim_deterministic"] = torch.equal(r1.images, r2.images)

    # zero denoiser: each DDIM step rescales by alpha_prev / alpha_t
    T = 100
    table = _alpha_bar_table(T, 0.008)
    z0 = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    res = run_loop(lambda z, t, i: (torch.zeros_like(z), {}), z0, T, SamplerConfig(steps=T, clip_x0=False),
                   keep_latents=True)
    ts = list(range(T - 1, -1, -1))
    want, worst = z0.numpy().copy(), 0.0
    for i, t in enumerate(ts):
        prev = table[ts[i + 1]] if i + 1 < len(ts) else 1.0
        want = want * (math.sqrt(prev) / math.sqrt(table[t]))
        worst = max(worst, float(np.abs(res.latents[i + 1].numpy() - want).max() / np.abs(want).max()))
    results["zero_denoiser_closed_form"] = worst <= 1e-12

    # DDPM with the exact Gaussian-data denoiser: per-step marginal variance follows the schedule
    # one sample of n independent pixels, so a single noise stream drives every step
    T, n, std = 1000, 8192, 0.5
    ddpm = SamplerConfig(method="ddpm", steps=T, clip_x0=False)
    zT = torch.from_numpy(np.random.default_rng(seed + 1).normal(size=(1, 2, 64, 64)))
    res = run_loop(gaussian_eps(std, T), zT, T, ddpm, seeds=[seed], keep_latents=True)
    table = _alpha_bar_table(T, 0.008)
    lat = res.latents.reshape(T + 1, n).numpy()
    rel_dev = []
    for i in range(1, T + 1):
        t_prev = T - 1 - i
        ab = table[t_prev] if t_prev >= 0 else 1.0
        var_want = ab * std ** 2 + (1 - ab)
        rel_dev.append(abs(lat[i].var() / var_want - 1))
    # 4 standard errors of a variance estimate from n normal draws
    tol = 4 * math.sqrt(2 / n)
    final_mean_z = abs(lat[-1].mean()) / (std / math.sqrt(n))
    results["ddpm_variance"] = max(rel_dev) <= tol
    results["ddpm_mean"] = final_mean_z <= 4
    ok = all(results.values())
    return Report("sampler", ok, f"zero-denoiser error {worst:.1e}; DDPM max variance deviation "
                  f"{max(rel_dev):.3f} (<= {tol:.3f}); failed: {[k for k, v in results.items() if not v] or 'none'}",
                  {**results, "ddpm_max_rel_dev": max(rel_dev), "ddpm_final_var": float(lat[-1].var())})


# -- 7: concept bank ------------------------------------------------------------------------------

def random_record(rng: np.random.Generator, i: int) -> ConceptRecord:
    d, layers = int(rng.integers(4, 65)), int(rng.integers(1, 6))
    return ConceptRecord(f"concept-{i}", f"V{1 + i % 8}*", str(rng.choice(["circle", "square", "cross"])),
                         rng.normal(size=(layers, 2, 2, d)).astype(np.float32),
                         config_hash=f"{i:016x}", backbone_hash=f"{2 * i:016x}")


@timed
def check_bank(n_records: int = 100, seed: int = 0) -> Report:
    rng = np.random.default_rng(seed)
    results = {"roundtrip": True}
    with tempfile.TemporaryDirectory() as tmp:
        bank = ConceptBank(Path(tmp) / "bank")
        recs = [random_record(rng, i) for i in range(n_records)]
        for r in recs:
            bank.save(r)
        reopened = ConceptBank(Path(tmp) / "bank")
        for r in recs:
            got = reopened.load(r.name)
            results["roundtrip"] &= got.equals(r) and got.to_bytes() == r.to_bytes()
        path = Path(tmp) / "bank" / "concept-0.ltxb"
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        try:
            reopened.load("concept-0")
            results["corruption_raised"] = False
        except CorruptionError:
            results["corruption_raised"] = True
        results["check_reports"] = any("concept-0" in p for p in ConceptBank(Path(tmp) / "bank").problems)
    raw = bytearray(recs[1].to_bytes())
    raw[-40] ^= 0x01
    try:
        ConceptRecord.from_bytes(bytes(raw))
        results["checksum_raised"] = False
    except CorruptionError:
        results["checksum_raised"] = True
    try:
        container.decode(container.encode(recs[1].meta(), {"rows": recs[1].rows}, version=99))
        results["version_raised"] = False
    except VersionError:
        results["version_raised"] = True
    ok = all(results.values())
    return Report("bank", ok, f"{n_records} records; failed: {[k for k, v in results.items() if not v] or 'none'}",
                  results)


SUITES = {
    "autodiff": check_autodiff, "schedule": check_schedule, "blend": check_blend,
    "routing": check_routing, "guidance": check_guidance, "sampler": check_sampler, "bank": check_bank,
}


def run_all(names=None) -> list[Report]:
    return [SUITES[n]() for n in (names or SUITES)]
