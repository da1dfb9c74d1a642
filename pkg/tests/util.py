"""Shared test helpers: tiny configs, independent oracles, gradient checks."""

import math

import numpy as np
import torch

import mmkd

TINY_DIMS = {"l": 6, "v": 4, "a": 5}


def tiny_cfg(dims=None, d_model=8, n_heads=2, depth=2, d_hid=16, dropout=0.0):
    return mmkd.ModelConfig(
        d_model=d_model,
        n_heads=n_heads,
        depth=depth,
        d_hid=d_hid,
        conv_kernel=3,
        dims=dict(dims or TINY_DIMS),
        dropout=dropout,
    )


def tiny_dataset(n=6, seed=0, dims=None, len_range=(2, 6), **kw):
    return mmkd.generate_synthetic(
        n, dims=dict(dims or TINY_DIMS), len_range=len_range, seed=seed, **kw
    )


def tiny_batch(n=4, seed=0, dims=None, len_range=(2, 6)):
    ds = tiny_dataset(n, seed, dims, len_range)
    return mmkd.collate(ds.samples), ds


def mvsc_brute_force(views, labels, lam, tau, normalize=True):
    """Literal double-precision evaluation of the multi-view loss.

    For each anchor j: positives are all other views within lam in label
    distance; the term is the mean of -log(exp(v_j.v_p / tau) / sum over
    all non-anchor views of exp(v_j.v_a / tau)); anchors without positives
    contribute zero; the result is the sum over anchors.
    """
    v = np.asarray(views, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if normalize:
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
    n = v.shape[0]
    total = 0.0
    for j in range(n):
        positives = [p for p in range(n) if p != j and abs(y[p] - y[j]) <= lam]
        if not positives:
            continue
        denom = 0.0
        for a in range(n):
            if a != j:
                denom += math.exp(float(v[j] @ v[a]) / tau)
        inner = 0.0
        for p in positives:
            inner += math.log(math.exp(float(v[j] @ v[p]) / tau) / denom)
        total += -inner / len(positives)
    return total


def random_view_set(batch_size, d, seed):
    """A synthetic view set: 7 views per sample, views share the sample label."""
    rng = np.random.default_rng(seed)
    views = rng.standard_normal((7 * batch_size, d))
    labels = np.tile(rng.uniform(-3, 3, size=batch_size), 7)
    return views, labels


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grads_central_diff(loss_fn, tensors, n_coords=4, eps=1e-5, tol=1e-4, seed=0):
    """Compare autograd gradients of ``loss_fn()`` against central
    differences on sampled coordinates of each tensor (double precision)."""
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    assert loss.dtype == torch.float64, "gradient checks run in double precision"
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    checked = 0
    for t, g in zip(tensors, grads):
        flat = t.detach().reshape(-1)
        k = min(n_coords, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        for c in coords:
            c = int(c)
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + eps
                up = float(loss_fn())
                flat[c] = orig - eps
                down = float(loss_fn())
                flat[c] = orig
            numeric = (up - down) / (2 * eps)
            analytic = 0.0 if g is None else float(g.reshape(-1)[c])
            err = rel_err(analytic, numeric)
            assert err < tol, (
                f"gradient mismatch (coord {c} of {tuple(t.shape)}): "
                f"analytic={analytic:.6e} numeric={numeric:.6e} rel={err:.2e}"
            )
            checked += 1
    assert checked > 0


def op_gradient_cases(seed):
    """(name, loss_fn, params) triples covering every parameterized op.

    Each loss_fn contracts the op output against a fixed random tensor so
    the scalar depends on every output coordinate.
    """
    torch.manual_seed(seed)
    cfg = tiny_cfg()
    model = mmkd.build_model(cfg, seed).double()
    model.eval()
    batch, _ = tiny_batch(n=3, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)

    def probe(shape):
        return torch.randn(shape, generator=gen, dtype=torch.float64)

    with torch.no_grad():
        seqs, pads = model.project(batch)
        frozen = {m: s.detach() for m, s in seqs.items()}
        d_v0 = model.teacher_binary_fuse(frozen["l"], frozen["v"], pads["l"], pads["v"], "v").detach()
        d_a0 = model.teacher_binary_fuse(frozen["l"], frozen["a"], pads["l"], pads["a"], "a").detach()
        s_v0 = model.student_intra_fuse(frozen["v"], pads["v"], "v").detach()
        s_a0 = model.student_intra_fuse(frozen["a"], pads["a"], "a").detach()
        h = torch.randn(3, cfg.d_model, generator=gen, dtype=torch.float64)

    cases = []

    def project_loss():
        out, _ = model.project(batch)
        return sum((out[m] * probes_proj[m]).sum() for m in ("l", "v", "a"))

    probes_proj = {m: probe(frozen[m].shape) for m in frozen}
    cases.append(
        ("conv_projection", project_loss, list(model.proj_conv.parameters()))
    )

    for m, tgt0 in (("v", d_v0), ("a", d_a0)):
        p = probe(tgt0.shape)
        def dec_loss(m=m, p=p):
            out = model.teacher_binary_fuse(frozen["l"], frozen[m], pads["l"], pads[m], m)
            return (out * p).sum()
        params = list(model.decoders[m].parameters()) + [model.cls[f"dec_{m}"]]
        cases.append((f"teacher_decoder_{m}", dec_loss, params))

    p_tri = probe((3, cfg.d_model))
    def tri_loss():
        out = model.teacher_trinary_fuse(frozen["l"], d_v0, d_a0)
        return (out * p_tri).sum()
    cases.append(
        (
            "teacher_trinary_and_projector",
            tri_loss,
            list(model.trinary_encoder.parameters())
            + list(model.teacher_projector.parameters()),
        )
    )

    for m, s0 in (("v", s_v0), ("a", s_a0)):
        p = probe(s0.shape)
        def intra_loss(m=m, p=p):
            out = model.student_intra_fuse(frozen[m], pads[m], m)
            return (out * p).sum()
        params = list(model.student_encoders[m].parameters()) + [model.cls[f"stu_{m}"]]
        cases.append((f"student_intra_{m}", intra_loss, params))

    pair_inputs = {"la": (frozen["l"], s_a0), "lv": (frozen["l"], s_v0), "av": (s_a0, s_v0)}
    for pair, (s1, s2) in pair_inputs.items():
        p = probe((3, cfg.d_model))
        def bi_loss(pair=pair, s1=s1, s2=s2, p=p):
            out = model.student_bimodal_fuse(s1, s2, pair)
            return (out * p).sum()
        params = list(model.bimodal_encoders[pair].parameters()) + list(
            model.bimodal_projectors[pair].parameters()
        )
        cases.append((f"student_bimodal_{pair}", bi_loss, params))

    for head in mmkd.ALL_HEADS:
        p = probe((3,))
        def head_loss(head=head, p=p):
            return (model.regress(h, head) * p).sum()
        cases.append((f"head_{head}", head_loss, list(model.heads[head].parameters())))

    return model, batch, cases


def loss_gradient_cases(seed):
    """(name, loss_fn, input tensors) triples covering every loss."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    b, d = 3, 6
    labels = torch.empty(b, dtype=torch.float64).uniform_(-3, 3, generator=gen)
    reps = {
        h: torch.randn(b, d, generator=gen, dtype=torch.float64, requires_grad=True)
        for h in mmkd.ALL_HEADS
    }
    mids = {
        k: torch.randn(b, d, generator=gen, dtype=torch.float64, requires_grad=True)
        for k in ("f_l", "f_v", "f_a")
    }
    preds = {
        h: torch.randn(b, generator=gen, dtype=torch.float64, requires_grad=True)
        for h in mmkd.ALL_HEADS
    }
    ccfg = mmkd.ContrastiveConfig(lam=0.9, tau=0.1)

    cases = []
    views_inputs = list(reps.values())
    def mvsc_fn():
        views, view_labels = mmkd.build_view_set(reps, labels)
        return mmkd.mvsc_loss(views, view_labels, ccfg)
    cases.append(("mvsc_loss", mvsc_fn, views_inputs))

    cases.append(
        ("uniview_sc_loss", lambda: mmkd.uniview_sc_loss(reps["t"], labels, ccfg), [reps["t"]])
    )
    cases.append(
        (
            "regression_loss",
            lambda: mmkd.regression_loss(preds, labels)[0],
            list(preds.values()),
        )
    )
    for variant in ("va", "pairs", "all"):
        student_inputs = [reps[k] for k in ("v", "a", "la", "lv", "av")]
        cases.append(
            (
                f"mse_kd_{variant}",
                lambda variant=variant: mmkd.mse_kd_loss(variant, reps, mids),
                student_inputs,
            )
        )
    return cases
