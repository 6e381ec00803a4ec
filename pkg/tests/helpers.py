"""Shared test utilities: tiny instances, gradient checking, small configs."""

import numpy as np

from tmlab import adapt as AD
from tmlab import model as M
from tmlab.sits_data import TimeSeriesSample


def tiny_sample(rng, t=5, n=4, c=3, k=3, sid="s", day_lo=1, day_hi=200):
    ti = int(rng.integers(3, t + 1))
    ni = int(rng.integers(2, n + 1))
    days = np.sort(rng.choice(np.arange(day_lo, day_hi), size=ti, replace=False))
    pixels = rng.random((ti, ni, c)).astype(np.float32)
    return TimeSeriesSample(sid, days.astype(np.int64), pixels,
                            int(rng.integers(k)))


def tiny_model(rng, c=3, k=3, d=8, d_k=4, max_shift=30, dtype=np.float32):
    dims = M.ModelDims(n_channels=c, n_classes=k, d_h=d, d_e=d, d_k=d_k, d_v=d)
    posenc = M.PosEncConfig(d_e=d, max_shift=max_shift)
    names = [f"c{j}" for j in range(k - 1)] + ["unknown"]
    return M.init_params(dims, posenc, names, rng, dtype=dtype)


def gradcheck_instance(seed, b=3, t=5, n=4, c=3, k=3):
    """Random f64 model + ragged batch + per-sample loss weights."""
    rng = np.random.default_rng(seed)
    samples = [tiny_sample(rng, t, n, c, k, sid=f"s{i}") for i in range(b)]
    params = tiny_model(rng, c=c, k=k, dtype=np.float64)
    batch = M.collate(samples, dtype=np.float64)
    weights = rng.uniform(0.5, 1.5, size=b)
    return params, batch, weights


def loss_and_region(params, batch, weights, shift=3, gamma=1.0):
    """Loss plus a signature of the active ReLU regions at valid positions.

    The signature detects when a finite-difference stencil crosses an
    activation kink, where central differences stop estimating the
    derivative; it never looks at gradient values.
    """
    probs, cache = M.forward_batch(params, batch, shift, "source", train=True,
                                   update_running=False, want_cache=True)
    loss, _ = M.focal_loss_batch(probs, batch.labels, gamma, weights)
    vm = cache["wf"] > 0
    sig = (
        ((cache["xhat1"] > 0) & vm[..., None]).tobytes()
        + ((cache["xhat2"] > 0) & vm[..., None]).tobytes()
        + ((cache["a3"] > 0) & cache["tmask"][..., None]).tobytes()
        + (cache["g1p"] > 0).tobytes()
    )
    return loss, sig, cache


def run_gradcheck(seed, step=1e-4, gamma=1.0, shift=3):
    """FD-check every coordinate of every tensor on one random instance.

    Returns (max_rel_err, crossed) where crossed means the FD stencil left
    the base linear region somewhere and the instance must be re-drawn.
    """
    params, batch, weights = gradcheck_instance(seed)
    _, base_sig, cache = loss_and_region(params, batch, weights, shift, gamma)
    grads = M.backward_batch(params, cache, batch.labels, gamma, weights=weights)
    worst = 0.0
    for name, arr in params.param_items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            lp, sig_p, _ = loss_and_region(params, batch, weights, shift, gamma)
            arr[idx] = orig - step
            lm, sig_m, _ = loss_and_region(params, batch, weights, shift, gamma)
            arr[idx] = orig
            if sig_p != base_sig or sig_m != base_sig:
                return worst, True
            fd = (lp - lm) / (2.0 * step)
            ga = grads[name][idx]
            rel = abs(fd - ga) / max(abs(fd), abs(ga), 1e-8)
            worst = max(worst, rel)
    return worst, False


def gradcheck_clean_seed(seed, step=1e-4, gamma=1.0, shift=3, tries=40):
    """Run the check on the first derived instance with a valid FD stencil."""
    for attempt in range(tries):
        worst, crossed = run_gradcheck(seed + 1000 * attempt, step, gamma, shift)
        if not crossed:
            return worst
    raise AssertionError(f"no kink-free instance found for seed {seed}")


def robust_pretrain(dataset, cfg, dims, shiftaug=False, min_val_f1=0.98,
                    max_restarts=2):
    """Pretrain, restarting with a derived seed if optimization got stuck.

    A small fraction of random inits converge too slowly within the CPU
    budget; the validation score exposes that, and a deterministic restart
    (seed + 1000) replaces the run.
    """
    base_seed = cfg.seed
    best = None
    for attempt in range(max_restarts + 1):
        cfg.seed = base_seed + 1000 * attempt
        result = AD.pretrain_source(dataset, cfg, shiftaug=shiftaug, dims=dims)
        score = max((r.get("val_macro_f1", 0.0) for r in result.log), default=0.0)
        if best is None or score > best[0]:
            best = (score, result)
        if score >= min_val_f1:
            break
    cfg.seed = base_seed
    return best[1]


def small_train_config(**overrides) -> AD.TrainConfig:
    cfg = AD.TrainConfig(
        max_shift=45,
        batch_size=32,
        pixel_sample=12,
        timestep_sample=30,
        pretrain_epochs=4,
        pretrain_lr=1e-3,
        adapt_epochs=3,
        iters_per_epoch=20,
        adapt_lr=3e-4,
        weight_decay=1e-4,
        sample_cap=400,
        seed=0,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def small_dims(c=4, k=5, d=24, d_k=8):
    return M.ModelDims(n_channels=c, n_classes=k, d_h=d, d_e=d, d_k=d_k, d_v=d)
