import torch

ACCEPTANCE_LINES: list[str] = []


def report(name, ok, detail=""):
    """Record and print one acceptance verdict line, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def central_difference(fn, tensors, step=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, touched in place."""
    grads = []
    for x in tensors:
        g = torch.zeros_like(x)
        flat, gflat = x.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale


def check_gradients(fn, tensors, step=1e-5):
    """Relative error between autograd and central differences of ``fn``."""
    for x in tensors:
        x.grad = None
    with torch.enable_grad():
        out = fn()
        analytic = torch.autograd.grad(out, tensors)
    with torch.no_grad():
        numeric = central_difference(fn, tensors, step)
    return relative_error(analytic, numeric)


def mixed_trigger_config(env_cfg, params, seed, sigma=0.3):
    """A trigger whose near-constant threshold splits agents into VALID and VOID.

    The threshold sits at the median score of a probe rollout, so both
    decisions occur after step 0.  Negative medians use the inverted rule.
    """
    from etcomm import comm, mappo

    probe = mappo.collect_rollout(env_cfg, params, comm.TriggerConfig(), sigma, seed,
                                  torch.Generator().manual_seed(0))
    med = float(probe.kappa[1:].median())
    if med > 0:
        return comm.TriggerConfig(c=med, zeta=1 - 1e-9)
    return comm.TriggerConfig(c=1e-9, zeta=1 - 1e-9, invert=True)


def expected_slots(env_cfg, batch):
    """Replay the environment and rebuild every receiver's slot contents from scratch."""
    import numpy as np

    from etcomm import env

    state = env.reset(env_cfg, batch.seed)
    out = []
    for t in range(batch.T):
        p = state.positions
        n = len(p)
        adj = np.linalg.norm(p[:, None] - p[None], axis=-1) < env_cfg.comm_range
        obs = env.observe_all(state, env_cfg)
        sent = batch.m_self[t].numpy()
        exp = np.zeros((n, n, sent.shape[1]))
        for i in range(n):
            exp[i, 0] = sent[i]
            for k in range(1, n):
                j = obs[i].order[k]
                if j >= 0 and bool(batch.valid[t, j]) and adj[i, j]:
                    exp[i, k] = sent[j]
        out.append(exp)
        state, _, _ = env.step(state, batch.env_actions[t], int(batch.valid[t].sum()), env_cfg)
    return out
