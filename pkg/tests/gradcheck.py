"""Finite-difference gradient harness shared by the model and acceptance tests.

The small model here matches the configuration the gradient check is
specified on: depth 2, width 16, three segments of (2 text, 4 video) tokens.
"""

import numpy as np
import torch

from m2dt.diffusion import make_zero_snr_schedule
from m2dt.masks import build_grouped_plan, uniform_layout
from m2dt.model import ModelConfig, cast_params, forward, loss_and_grads
from m2dt.objective import BatchSample, masked_v_loss, prepare_inputs
from m2dt.synthetic import probe_params

CFG = ModelConfig(depth=2, dim=16, heads=4, text_vocab=9, token_dim=4, max_T=20, max_len=18)
LAYOUT = uniform_layout(3, 2, 4)


def make_batch(B=2, seed=0, m_c=(1, 1, 1), dtype=torch.float64):
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.standard_normal((B, LAYOUT.num_video, CFG.token_dim))).to(dtype)
    eps = torch.from_numpy(rng.standard_normal((B, LAYOUT.num_video, CFG.token_dim))).to(dtype)
    m_c = np.tile(np.asarray(m_c), (B, 1))
    t = np.where(m_c == 0, 0, rng.integers(1, CFG.max_T + 1, size=(B, 1)))
    ids = torch.from_numpy(rng.integers(0, CFG.text_vocab, size=(B, LAYOUT.num_text)))
    return BatchSample(ids, z, eps, t, m_c)


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-12 else np.linalg.norm(a - b) / denom


def finite_difference_check(dtype, m_c, tol, entries=20, seed=0):
    """Analytic gradients in ``dtype`` vs float64 central differences of the loss.

    Checks ``entries`` random coordinates of every parameter tensor and
    returns the worst per-tensor relative error (norm of the difference over
    the larger norm).
    """
    params = cast_params(probe_params(CFG, seed), dtype)
    batch = make_batch(B=2, m_c=m_c, seed=seed)
    sched = make_zero_snr_schedule(CFG.max_T)
    plan = build_grouped_plan(LAYOUT, "V2")
    _, grads = loss_and_grads(params, CFG, batch.to(dtype), LAYOUT, plan, sched)
    p64 = cast_params(params, torch.float64)
    b64 = batch.to(torch.float64)
    rng = np.random.default_rng(seed)

    def loss_at(name, flat_idx, delta):
        p = dict(p64)
        t = p[name].clone()
        t.view(-1)[flat_idx] += delta
        p[name] = t
        z_in, target = prepare_inputs(b64, LAYOUT, sched)
        out = forward(p, CFG, LAYOUT, plan, b64.text_ids, z_in, b64.t)
        return masked_v_loss(out, target, b64.m_c, LAYOUT).item()

    worst = 0.0
    for name, tensor in p64.items():
        size = tensor.numel()
        idx = rng.choice(size, size=min(entries, size), replace=False)
        analytic = grads[name].detach().double().view(-1)[idx].numpy()
        numeric = []
        for i in idx:
            h = 1e-5 * max(1.0, abs(tensor.view(-1)[i].item()))
            numeric.append((loss_at(name, i, h) - loss_at(name, i, -h)) / (2 * h))
        err = relative_error(analytic, np.array(numeric))
        assert err <= tol, (name, err)
        worst = max(worst, err)
    return worst
