"""Observation encoders: deterministic PCA baseline and a small trainable
affine variational autoencoder with a contrastive action term.

Observations are featurized by block-averaging both channels down to k x k
and flattening, so encoders are linear maps over a 2*k*k vector. Decoding is
retrieval: the nearest covered state from a bank, which keeps downstream
consumers supplied with exact particle positions.

The combined training objective for the trainable variant is

    L = 1/2 (L_vae(x1) + L_vae(x2)) + alpha * L_action(x1, x2)

with L_vae = squared reconstruction error from the mean latent plus the KL of
the diagonal Gaussian head against the unit Gaussian, and L_action a
hinge / attraction pair: max(0, d_m - ||z1 - z2||)^2 for action pairs,
||z1 - z2||^2 for no-action pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyBank, EmptyDataset, FormatError, ShapeMismatch,
                     UnsupportedVariant)
from .sim import Observation

MODEL_VERSION = 1

# Height channel is divided by the deepest stack a four-fold task can build.
HEIGHT_NORM = 15.0

VARIANT_PCA = "fitted-pca"
VARIANT_VAE = "linear-vae"

_VAE_PARAM_SHAPES = ("enc_w", "enc_b", "logvar_w", "logvar_b", "dec_w", "dec_b")


@dataclass
class EncoderModel:
    variant: str
    resolution: int
    downsample: int
    latent_dim: int
    alpha: float = 1.0
    d_m: float | None = None
    params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return 2 * self.downsample * self.downsample


@dataclass
class EncodedDataset:
    """Latent image of a dataset; row i mirrors dataset.tuples[i]."""

    z0: np.ndarray  # (n, d)
    z1: np.ndarray  # (n, d)
    a: np.ndarray  # (n,) int
    actions: list  # n FoldActions

    @property
    def n(self) -> int:
        return len(self.actions)


def observation_features(obs: Observation, downsample: int) -> np.ndarray:
    """Block-averaged occupancy and normalized height, flattened."""
    r = obs.resolution
    if r % downsample != 0:
        raise ShapeMismatch(
            f"resolution {r} not divisible by downsample {downsample}")
    b = r // downsample
    occ = obs.occupancy.reshape(downsample, b, downsample, b).mean(axis=(1, 3))
    hgt = obs.height.reshape(downsample, b, downsample, b).mean(axis=(1, 3))
    return np.concatenate([occ.ravel(), hgt.ravel() / HEIGHT_NORM])


def _dataset_features(dataset, downsample):
    rows = []
    for t in dataset.tuples:
        rows.append(observation_features(t.obs0, downsample))
        rows.append(observation_features(t.obs1, downsample))
    return np.asarray(rows)


def fit_encoder(dataset, variant: str = VARIANT_PCA,
                latent_dim: int = 8, downsample: int = 16,
                alpha: float = 1.0, d_m: float | None = None,
                learning_rate: float = 1e-4, epochs: int = 200,
                batch_size: int | None = 16, warmup_epochs: int = 20,
                seed: int = 0) -> EncoderModel:
    """Fit an encoder on every observation of the dataset."""
    if not dataset.tuples:
        raise EmptyDataset("cannot fit an encoder on an empty dataset")
    if variant == VARIANT_PCA:
        return _fit_pca(dataset, latent_dim, downsample)
    if variant == VARIANT_VAE:
        return _fit_vae(dataset, latent_dim, downsample, alpha, d_m,
                        learning_rate, epochs, batch_size, warmup_epochs, seed)
    raise UnsupportedVariant(f"unknown encoder variant {variant!r}")


def _fit_pca(dataset, latent_dim, downsample):
    x = _dataset_features(dataset, downsample)
    if latent_dim > x.shape[1]:
        raise EmptyDataset(
            f"latent_dim {latent_dim} exceeds feature dim {x.shape[1]}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    components = np.zeros((latent_dim, x.shape[1]))
    take = min(latent_dim, vt.shape[0])
    components[:take] = vt[:take]
    return EncoderModel(
        variant=VARIANT_PCA, resolution=dataset.resolution,
        downsample=downsample, latent_dim=latent_dim,
        params={"mean": mean, "components": components})


def encode_features(model: EncoderModel, x: np.ndarray) -> np.ndarray:
    if model.variant == VARIANT_PCA:
        return model.params["components"] @ (x - model.params["mean"])
    if model.variant == VARIANT_VAE:
        return model.params["enc_w"] @ x + model.params["enc_b"]
    raise UnsupportedVariant(f"unknown encoder variant {model.variant!r}")


def encode(model: EncoderModel, obs: Observation) -> np.ndarray:
    """Deterministic latent vector for one observation."""
    if obs.resolution != model.resolution:
        raise ShapeMismatch(
            f"observation resolution {obs.resolution} != model "
            f"resolution {model.resolution}")
    return encode_features(model, observation_features(obs, model.downsample))


def decode(model: EncoderModel, z: np.ndarray, bank):
    """Nearest covered state to z; ties go to the lowest bank index."""
    if not bank:
        raise EmptyBank("decode requires a non-empty state bank")
    zs = np.asarray([entry[0] for entry in bank])
    dists = np.linalg.norm(zs - np.asarray(z)[None, :], axis=1)
    return bank[int(np.argmin(dists))][1]


def build_bank(dataset, model: EncoderModel):
    """(latent, state) per distinct observation, first-appearance order."""
    bank = []
    seen = set()
    for t in dataset.tuples:
        for obs, state in ((t.obs0, t.state0), (t.obs1, t.state1)):
            k = obs.key()
            if k not in seen:
                seen.add(k)
                bank.append((encode(model, obs), state))
    return bank


def encode_dataset(dataset, model: EncoderModel) -> EncodedDataset:
    z0 = np.asarray([encode(model, t.obs0) for t in dataset.tuples])
    z1 = np.asarray([encode(model, t.obs1) for t in dataset.tuples])
    a = np.asarray([t.a for t in dataset.tuples], dtype=np.int64)
    return EncodedDataset(z0=z0, z1=z1, a=a,
                          actions=[t.u for t in dataset.tuples])


# ---------------------------------------------------------------------------
# Trainable variant: losses and hand-rolled gradients.
# ---------------------------------------------------------------------------

def _require_vae(model):
    if model.variant != VARIANT_VAE:
        raise UnsupportedVariant(
            f"loss functions need the {VARIANT_VAE} variant, "
            f"got {model.variant!r}")


def _vae_forward(params, x):
    mu = params["enc_w"] @ x + params["enc_b"]
    lv = params["logvar_w"] @ x + params["logvar_b"]
    xr = params["dec_w"] @ mu + params["dec_b"]
    return mu, lv, xr


def _vae_loss_value(params, x):
    mu, lv, xr = _vae_forward(params, x)
    rec = float(np.sum((xr - x) ** 2))
    kl = 0.5 * float(np.sum(mu ** 2 + np.exp(lv) - lv - 1.0))
    return rec + kl


def _action_loss_value(z1, z2, a, d_m):
    dist = float(np.linalg.norm(z1 - z2))
    if a == 1:
        return max(0.0, d_m - dist) ** 2
    return dist ** 2


def loss_vae(model: EncoderModel, obs: Observation) -> float:
    """Reconstruction error from the mean latent plus the Gaussian KL term."""
    _require_vae(model)
    x = observation_features(obs, model.downsample)
    return _vae_loss_value(model.params, x)


def loss_action(model: EncoderModel, obs1: Observation, obs2: Observation,
                a: int) -> float:
    """Attraction for a=0 pairs, hinge push beyond d_m for a=1 pairs."""
    _require_vae(model)
    z1 = encode(model, obs1)
    z2 = encode(model, obs2)
    return _action_loss_value(z1, z2, a, model.d_m)


def loss_combined(model: EncoderModel, obs1: Observation, obs2: Observation,
                  a: int) -> float:
    _require_vae(model)
    return 0.5 * (loss_vae(model, obs1) + loss_vae(model, obs2)) \
        + model.alpha * loss_action(model, obs1, obs2, a)


def _zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def _pair_loss_and_grads(params, x1, x2, a, alpha, d_m):
    """Combined pair loss with analytic gradients for every parameter."""
    grads = _zero_grads(params)
    mus = []
    loss = 0.0
    for x in (x1, x2):
        mu, lv, xr = _vae_forward(params, x)
        mus.append(mu)
        loss += 0.5 * (float(np.sum((xr - x) ** 2))
                       + 0.5 * float(np.sum(mu ** 2 + np.exp(lv) - lv - 1.0)))
        dxr = 0.5 * 2.0 * (xr - x)
        grads["dec_w"] += np.outer(dxr, mu)
        grads["dec_b"] += dxr
        dmu = params["dec_w"].T @ dxr + 0.5 * mu
        dlv = 0.5 * 0.5 * (np.exp(lv) - 1.0)
        grads["enc_w"] += np.outer(dmu, x)
        grads["enc_b"] += dmu
        grads["logvar_w"] += np.outer(dlv, x)
        grads["logvar_b"] += dlv

    z1, z2 = mus
    e = z1 - z2
    dist = float(np.linalg.norm(e))
    if a == 1:
        gap = d_m - dist
        if gap > 0.0:
            loss += alpha * gap ** 2
            if dist > 0.0:
                dz1 = alpha * (-2.0 * gap) * e / dist
                # enc_b receives +dz1 via z1 and -dz1 via z2: net zero.
                grads["enc_w"] += np.outer(dz1, x1) - np.outer(dz1, x2)
    else:
        loss += alpha * dist ** 2
        dz1 = alpha * 2.0 * e
        grads["enc_w"] += np.outer(dz1, x1) - np.outer(dz1, x2)
    return loss, grads


def _batch_loss_and_grads(params, xs1, xs2, flags, alpha, d_m):
    total = 0.0
    grads = _zero_grads(params)
    for x1, x2, a in zip(xs1, xs2, flags):
        loss, g = _pair_loss_and_grads(params, x1, x2, a, alpha, d_m)
        total += loss
        for k in grads:
            grads[k] += g[k]
    n = len(flags)
    for k in grads:
        grads[k] /= n
    return total / n, grads


def _batch_loss_value(params, xs1, xs2, flags, alpha, d_m):
    total = 0.0
    for x1, x2, a in zip(xs1, xs2, flags):
        total += 0.5 * (_vae_loss_value(params, x1)
                        + _vae_loss_value(params, x2))
        z1 = params["enc_w"] @ x1 + params["enc_b"]
        z2 = params["enc_w"] @ x2 + params["enc_b"]
        total += alpha * _action_loss_value(z1, z2, a, d_m)
    return total / len(flags)


def _fit_vae(dataset, latent_dim, downsample, alpha, d_m, learning_rate,
             epochs, batch_size, warmup_epochs, seed):
    xs1 = np.asarray([observation_features(t.obs0, downsample)
                      for t in dataset.tuples])
    xs2 = np.asarray([observation_features(t.obs1, downsample)
                      for t in dataset.tuples])
    flags = np.asarray([t.a for t in dataset.tuples], dtype=np.int64)
    f = xs1.shape[1]
    rng = np.random.default_rng(seed)
    params = {
        "enc_w": rng.normal(0.0, 0.01, size=(latent_dim, f)),
        "enc_b": np.zeros(latent_dim),
        "logvar_w": rng.normal(0.0, 0.01, size=(latent_dim, f)),
        "logvar_b": np.zeros(latent_dim),
        "dec_w": rng.normal(0.0, 0.01, size=(f, latent_dim)),
        "dec_b": np.zeros(f),
    }

    def run(n_epochs, alpha_eff, d_m_eff, history=None):
        n = len(flags)
        for _ in range(n_epochs):
            if history is not None:
                history.append(_batch_loss_value(
                    params, xs1, xs2, flags, alpha_eff, d_m_eff))
            if batch_size is None or batch_size >= n:
                order = [np.arange(n)]
            else:
                perm = rng.permutation(n)
                order = [perm[i:i + batch_size]
                         for i in range(0, n, batch_size)]
            for idx in order:
                _, grads = _batch_loss_and_grads(
                    params, xs1[idx], xs2[idx], flags[idx], alpha_eff, d_m_eff)
                for k in params:
                    params[k] -= learning_rate * grads[k]

    if d_m is None:
        run(warmup_epochs, 0.0, 0.0)
        no_action = flags == 0
        if no_action.any():
            mu1 = xs1[no_action] @ params["enc_w"].T + params["enc_b"]
            mu2 = xs2[no_action] @ params["enc_w"].T + params["enc_b"]
            d_m = 2.0 * float(np.median(np.linalg.norm(mu1 - mu2, axis=1)))
        else:
            d_m = 1.0
    history = []
    run(epochs, alpha, d_m, history)
    history.append(_batch_loss_value(params, xs1, xs2, flags, alpha, d_m))
    return EncoderModel(
        variant=VARIANT_VAE, resolution=dataset.resolution,
        downsample=downsample, latent_dim=latent_dim, alpha=alpha, d_m=d_m,
        params=params, history=history)


def gradient_check(model: EncoderModel, batch, step: float = 1e-5) -> float:
    """Max relative deviation of analytic vs central-difference gradients.

    batch is a list of (obs1, obs2, a) triples. Every parameter component is
    probed.
    """
    _require_vae(model)
    xs1 = [observation_features(o1, model.downsample) for o1, _, _ in batch]
    xs2 = [observation_features(o2, model.downsample) for _, o2, _ in batch]
    flags = [a for _, _, a in batch]
    params = {k: v.copy() for k, v in model.params.items()}
    _, analytic = _batch_loss_and_grads(params, xs1, xs2, flags,
                                        model.alpha, model.d_m)
    worst = 0.0
    for name in _VAE_PARAM_SHAPES:
        arr = params[name]
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _batch_loss_value(params, xs1, xs2, flags,
                                   model.alpha, model.d_m)
            flat[i] = orig - step
            lo = _batch_loss_value(params, xs1, xs2, flags,
                                   model.alpha, model.d_m)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            an = analytic[name].ravel()[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Persistence: JSON container, exact round trip via repr floats.
# ---------------------------------------------------------------------------

def save_model(model: EncoderModel, path) -> None:
    record = {"version": MODEL_VERSION, "variant": model.variant,
              "resolution": model.resolution, "downsample": model.downsample,
              "latent_dim": model.latent_dim, "alpha": model.alpha,
              "d_m": model.d_m,
              "params": {k: {"shape": list(v.shape),
                             "data": [float(x) for x in v.ravel()]}
                         for k, v in model.params.items()}}
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_model(path) -> EncoderModel:
    with open(path, "r", encoding="ascii") as fh:
        try:
            record = json.loads(fh.read())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: offset {e.pos}: {e.msg}") from e
    version = record.get("version")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version!r}, "
                          f"expected {MODEL_VERSION}")
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in record["params"].items()}
    return EncoderModel(
        variant=record["variant"], resolution=int(record["resolution"]),
        downsample=int(record["downsample"]),
        latent_dim=int(record["latent_dim"]), alpha=float(record["alpha"]),
        d_m=None if record["d_m"] is None else float(record["d_m"]),
        params=params)
