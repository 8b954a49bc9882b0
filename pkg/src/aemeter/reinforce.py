"""Gaussian-policy REINFORCE fine-tuning from coarse exposure feedback.

The policy is a fixed-variance Gaussian centered on the network prediction.
The gradient estimator is realized as a surrogate loss
L = mean(r_i * (mu_i - a_i)^2 / (2*Sigma)); minimizing L performs ascent on
the expected reward, and its gradient matches the score-function estimator
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import AdamSpec, optimizer_step
from .data import bracket_targets, synth_bracket
from .network import forward_batch


class RewardOutcome(Enum):
    POSITIVE = 1
    NEGATIVE = -1
    EXCLUDED = 0


@dataclass
class GaussianPolicy:
    sigma_sq: float = 0.1

    def __post_init__(self):
        if self.sigma_sq <= 0:
            raise ValueError("sigma_sq must be positive")


@dataclass
class RewardSample:
    state: np.ndarray       # chw image
    action: float           # normalized units in [-1, 1]
    reward: int             # +1 | -1
    provenance: str = "oracle"


def reward_for(label, target_action, sampled_action, delta=0.1):
    """Three-row reward rule over the coarse label and the sampled action.

    well: positive iff the action lands within delta of the corrective one.
    under: actions at or below the corrective one are definitely wrong;
    anything beyond it is unknowable from the label and gets excluded.
    over: mirror image.
    """
    if label == "well":
        if abs(sampled_action - target_action) <= delta:
            return RewardOutcome.POSITIVE
        return RewardOutcome.NEGATIVE
    if label == "under":
        if sampled_action <= target_action:
            return RewardOutcome.NEGATIVE
        return RewardOutcome.EXCLUDED
    if label == "over":
        if sampled_action >= target_action:
            return RewardOutcome.NEGATIVE
        return RewardOutcome.EXCLUDED
    raise ValueError(f"unknown label {label!r}")


def sample_action(mu, policy, rng):
    """Draw from N(mu, sigma_sq), clamped to [-1, 1]; reports clamping."""
    a = mu + math.sqrt(policy.sigma_sq) * rng.standard_normal()
    clamped = a < -1.0 or a > 1.0
    return min(1.0, max(-1.0, a)), clamped


def log_prob(mu, a, policy):
    s = policy.sigma_sq
    return -((a - mu) ** 2) / (2.0 * s) - 0.5 * math.log(2.0 * math.pi * s)


def surrogate_loss(pred, actions, rewards, policy):
    """Differentiable surrogate whose negated gradient is the policy-gradient
    estimator: mean_i r_i * (mu_i - a_i)^2 / (2*Sigma)."""
    a = np.asarray(actions, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    diff = ag.sub(pred, ag.constant(a))
    sq = ag.square(diff)
    return ag.scale(ag.weighted_mean(sq, r), 1.0 / (2.0 * policy.sigma_sq))


def policy_gradient_step(params, batch, config, policy, opt_spec, rng=None,
                         mode="train"):
    """One optimizer step over a batch of non-excluded RewardSamples."""
    if not batch:
        raise ValueError("policy_gradient_step: empty batch")
    images = np.stack([s.state for s in batch]).astype(np.float64)
    actions = [s.action for s in batch]
    rewards = [s.reward for s in batch]
    params.zero_grad()
    pred, _, _ = forward_batch(params, images, config, mode=mode, rng=rng)
    loss = surrogate_loss(pred, actions, rewards, policy)
    ag.backward(loss)
    optimizer_step(params, params.grads(), opt_spec)
    return float(loss.data)


@dataclass
class FinetuneSpec:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.0001
    sigma_sq: float = 0.1
    delta: float = 0.1
    bracket_lo: float = -2.0
    bracket_hi: float = 2.0
    bracket_step: float = 0.2
    seed: int = 0


@dataclass
class FinetuneEpochStats:
    epoch: int
    mean_reward: float
    n_samples: int
    n_excluded: int
    clamp_rate: float
    mae_if_oracle: float = float("nan")


def _expand_pool(pool, config, spec):
    """Pooled (image, label) pairs -> per-bracket-item (chw image, label,
    normalized target) tuples, computed once per fine-tune."""
    from .camera import ImagePlane

    expanded = []
    for image, label in pool:
        if not isinstance(image, ImagePlane):
            image = ImagePlane(np.asarray(image), "encoded")
        for item in synth_bracket(image, spec.bracket_lo, spec.bracket_hi,
                                  spec.bracket_step):
            target_norm = item.target_action / config.scale_ev
            expanded.append((item.image.data.transpose(2, 0, 1).astype(np.float32),
                             label, target_norm))
    return expanded


def finetune(params, feedback_pool, config, spec=None, eval_pairs=None,
             log=None):
    """Policy-gradient fine-tuning loop over a pool of coarse-labeled images.

    `feedback_pool` is a list of (ImagePlane-or-array, label) with labels in
    {under, well, over}. Each epoch expands the pool through the bracket
    ladder, samples actions from the Gaussian policy around the current
    predictions, converts (label, target, action) into rewards, drops
    Excluded samples and takes Adam steps on the surviving batches.
    `eval_pairs`, when given, is a list of (chw image, gt EV) used to report
    MAE per epoch.
    """
    spec = spec or FinetuneSpec()
    if not feedback_pool:
        raise ValueError("feedback pool is empty")
    policy = GaussianPolicy(sigma_sq=spec.sigma_sq)
    opt = AdamSpec(lr=spec.lr)
    expanded = _expand_pool(feedback_pool, config, spec)

    history = []
    for epoch in range(spec.epochs):
        rng = np.random.default_rng((spec.seed, epoch))
        perm = rng.permutation(len(expanded))

        samples = []
        n_excl = 0
        n_clamped = 0
        rewards = []
        # mu for sampling comes from the current (eval-mode) predictions
        for start in range(0, len(perm), 256):
            idx = perm[start:start + 256]
            images = np.stack([expanded[i][0] for i in idx]).astype(np.float64)
            mu, _, _ = forward_batch(params, images, config, mode="eval")
            for j, i in enumerate(idx):
                chw, label, target_norm = expanded[i]
                a, clamped = sample_action(float(mu.data[j]), policy, rng)
                outcome = reward_for(label, target_norm, a, delta=spec.delta)
                if outcome is RewardOutcome.EXCLUDED:
                    n_excl += 1
                    continue
                n_clamped += int(clamped)
                rewards.append(outcome.value)
                samples.append(RewardSample(state=chw, action=a,
                                            reward=outcome.value))
        if not samples:
            import warnings
            warnings.warn(f"epoch {epoch}: every sample excluded, skipping")
            history.append(FinetuneEpochStats(epoch, 0.0, 0, n_excl, 0.0))
            continue

        for start in range(0, len(samples), spec.batch_size):
            batch = samples[start:start + spec.batch_size]
            policy_gradient_step(params, batch, config, policy, opt,
                                 rng=rng, mode="train")

        mae = float("nan")
        if eval_pairs:
            mae = evaluate_mae(params, eval_pairs, config)
        stats = FinetuneEpochStats(
            epoch=epoch,
            mean_reward=float(np.mean(rewards)),
            n_samples=len(samples),
            n_excluded=n_excl,
            clamp_rate=n_clamped / max(1, len(samples)),
            mae_if_oracle=mae,
        )
        history.append(stats)
        if log:
            log(f"{epoch}\t{stats.mean_reward:.4f}\t{stats.n_samples}"
                f"\t{stats.n_excluded}\t{stats.clamp_rate:.4f}\t{mae:.4f}")
    return params, history


def evaluate_mae(params, pairs, config, batch_size=256):
    """MAE in EV units over (chw image, gt EV) pairs."""
    total = 0.0
    n = len(pairs)
    for start in range(0, n, batch_size):
        chunk = pairs[start:start + batch_size]
        images = np.stack([c[0] for c in chunk]).astype(np.float64)
        gts = np.array([c[1] for c in chunk], dtype=np.float64)
        pred, _, _ = forward_batch(params, images, config, mode="eval")
        total += float(np.abs(pred.data * config.scale_ev - gts).sum())
    return total / n


def write_history(history, path):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("epoch\tmean_reward\tn_samples\tn_excluded\tclamp_rate"
                "\tmae_if_oracle\n")
        for h in history:
            f.write(f"{h.epoch}\t{h.mean_reward:.6f}\t{h.n_samples}"
                    f"\t{h.n_excluded}\t{h.clamp_rate:.6f}"
                    f"\t{h.mae_if_oracle:.6f}\n")
    os.replace(tmp, path)
