"""Training loops (timing predictor, main model, fine-tuning) and prediction.

Main-model training cuts each sample's mask interval afresh every epoch at
jittered label phases, both for the auxiliary target and, when input filtering
is on, for the window weights; evaluation always cuts at the timing
predictor's output. Early stopping watches the validation angle RMSE computed
through the full prediction path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..activation import ActivationMask, window_weights
from ..autodiff import Adam, EarlyStopper, Tensor, cosine_lr, no_grad
from ..dataset import WindowSample, augment_timing
from .losses import main_loss, timing_loss
from .metrics import metrics, rmse
from .networks import AblationFlags, EncoderConfig, MainModel, ModelBundle, TimingModel


class NumericDivergenceError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    accum_steps: int = 1          # micro-batches per optimizer step
    max_epochs: int = 60
    base_lr: float = 0.0025
    betas: tuple[float, float] = (0.9, 0.99)
    schedule_period: int = 20
    min_lr: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4
    alpha: float = 1.0
    jitter_sd: float = 0.02
    val_fraction: float = 0.1
    seed: int = 0
    timing_loss_mode: str = "symmetric"
    finetune_lr: float = 0.0005
    finetune_epochs: int = 10
    finetune_timing: bool = True


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(n)]


def stack_inputs(samples: list[WindowSample], dtype=np.float32) -> np.ndarray:
    return np.stack([s.input for s in samples]).astype(dtype)[:, None, :, :]


def _timing_targets(samples: list[WindowSample]) -> np.ndarray:
    return np.array([s.timing_label for s in samples], dtype=np.float64)


def _val_split(n: int, fraction: float, rng: np.random.Generator):
    if fraction <= 0 or n < 10:
        return np.arange(n), np.array([], dtype=np.int64)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _check_finite(loss: float):
    if not np.isfinite(loss):
        raise NumericDivergenceError(f"training loss became {loss}")


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        chunk = order[i : i + batch_size]
        if chunk.size >= 2:  # batch norm needs at least two samples
            yield chunk


def train_timing(
    samples: list[WindowSample],
    cfg: EncoderConfig = EncoderConfig(),
    tc: TrainConfig = TrainConfig(),
) -> TimingModel:
    """Step 1: fit the gait-timing predictor with squared-error loss."""
    rng_init, rng_split, rng_shuffle = _rngs(tc.seed, 3)
    model = TimingModel(cfg, rng_init)
    opt = Adam(model.parameters(), lr=tc.base_lr, betas=tc.betas)
    x_all = stack_inputs(samples)
    t_all = _timing_targets(samples)
    tr, va = _val_split(len(samples), tc.val_fraction, rng_split)
    stopper = EarlyStopper(tc.patience, tc.min_delta)

    for epoch in range(tc.max_epochs):
        opt.lr = cosine_lr(epoch, tc.base_lr, tc.schedule_period, tc.min_lr)
        model.train()
        for chunk in _batches(tr.size, tc.batch_size, rng_shuffle):
            idx = tr[chunk]
            pred = model(Tensor(x_all[idx]))
            loss = timing_loss(pred, t_all[idx], tc.timing_loss_mode)
            _check_finite(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_idx = va if va.size else tr
        val = _eval_timing_loss(model, x_all[val_idx], t_all[val_idx], tc)
        if stopper.update(val, model.state_dict()):
            break
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    return model


def _eval_timing_loss(model: TimingModel, x: np.ndarray, t: np.ndarray, tc: TrainConfig) -> float:
    model.eval()
    with no_grad():
        pred = model(Tensor(x))
        return timing_loss(pred, t, tc.timing_loss_mode).item()


def predict_timing(model: TimingModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(model(Tensor(x[i : i + batch_size])).data)
    return np.concatenate(out, axis=0).astype(np.float64)


def _filter_weights(
    samples: list[WindowSample],
    masks: dict[str, ActivationMask],
    phases: np.ndarray | None = None,
    win: int = 1200,
) -> np.ndarray:
    """Per-sample mask-filter weights cut at given phases (defaults to each
    sample's own cut phases)."""
    out = np.empty((len(samples), win, samples[0].input.shape[1]))
    for i, s in enumerate(samples):
        ts, te = phases[i] if phases is not None else s.cut_phases
        out[i] = window_weights(masks[s.subject_id], ts, te, win)
    return out


def predict_angles(
    main: MainModel,
    timing: TimingModel | None,
    samples: list[WindowSample],
    masks: dict[str, ActivationMask] | None,
    batch_size: int = 256,
) -> np.ndarray:
    """Full prediction path: (timing -> mask cut -> filter) -> forward ->
    recouple. Baseline mode regresses the angle directly."""
    flags = main.flags
    x = stack_inputs(samples)
    if flags.mask_filter:
        if masks is None:
            raise ValueError("mask filtering is on but no masks were given")
        if timing is None:
            raise ValueError("mask filtering is on but no timing model was given")
        t_hat = predict_timing(timing, x, batch_size)
        w = _filter_weights(samples, masks, phases=t_hat, win=x.shape[2])
        x = (x * w[:, None, :, :]).astype(x.dtype)
    main.eval()
    preds = np.empty(len(samples))
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            out = main(Tensor(x[i : i + batch_size]))
            if flags.decoupling:
                g = out.pattern.data.astype(np.float64)
                mu = out.amplitude.data[:, 0].astype(np.float64)
                sg = out.amplitude.data[:, 1].astype(np.float64)
                preds[i : i + g.size] = mu * g + sg
            else:
                a = out.angle.data.astype(np.float64)
                preds[i : i + a.size] = a
    return preds


def _epoch_views(
    samples: list[WindowSample],
    masks: dict[str, ActivationMask],
    flags: AblationFlags,
    jitter_sd: float,
    rng: np.random.Generator,
) -> list[WindowSample]:
    if not (flags.activation_aux or flags.mask_filter):
        return samples
    return [augment_timing(s, masks[s.subject_id], jitter_sd, rng) for s in samples]


def train_main(
    samples: list[WindowSample],
    masks: dict[str, ActivationMask] | None,
    flags: AblationFlags,
    cfg: EncoderConfig = EncoderConfig(),
    tc: TrainConfig = TrainConfig(),
    timing: TimingModel | None = None,
) -> MainModel:
    """Step 2: fit the joint angle model under the given strategy switches."""
    needs_mask = flags.activation_aux or flags.mask_filter
    if needs_mask and masks is None:
        raise ValueError("these flags need per-subject activation masks")
    if flags.mask_filter and timing is None:
        raise ValueError("mask filtering needs a trained timing model for validation")
    rng_init, rng_split, rng_shuffle, rng_jitter = _rngs(tc.seed, 4)
    main = MainModel(cfg, flags, rng_init)
    opt = Adam(main.parameters(), lr=tc.base_lr, betas=tc.betas)
    tr, va = _val_split(len(samples), tc.val_fraction, rng_split)
    train_s = [samples[i] for i in tr]
    val_s = [samples[i] for i in va]
    angles = np.array([s.angle_label for s in samples])
    stopper = EarlyStopper(tc.patience, tc.min_delta)

    for epoch in range(tc.max_epochs):
        opt.lr = cosine_lr(epoch, tc.base_lr, tc.schedule_period, tc.min_lr)
        epoch_s = _epoch_views(train_s, masks, flags, tc.jitter_sd, rng_jitter) if needs_mask else train_s
        x = stack_inputs(epoch_s)
        if flags.mask_filter:
            w = _filter_weights(epoch_s, masks, win=x.shape[2])
            x = (x * w[:, None, :, :]).astype(x.dtype)
        labels = {
            "pattern": np.array([s.pattern_label for s in epoch_s]),
            "amplitude": np.array([s.amp_label for s in epoch_s]),
            "angle": np.array([s.angle_label for s in epoch_s]),
            "mask": np.stack([s.mask_target for s in epoch_s]),
        }
        main.train()
        micro = 0
        opt.zero_grad()
        for chunk in _batches(len(epoch_s), tc.batch_size, rng_shuffle):
            out = main(Tensor(x[chunk]))
            batch_labels = {k: v[chunk] for k, v in labels.items()}
            loss, _ = main_loss(out, batch_labels, tc.alpha, flags)
            _check_finite(loss.item())
            if tc.accum_steps > 1:
                loss = loss * (1.0 / tc.accum_steps)
            loss.backward()
            micro += 1
            if micro % tc.accum_steps == 0:
                opt.step()
                opt.zero_grad()
        if micro % tc.accum_steps != 0:
            opt.step()
            opt.zero_grad()

        val_set = val_s if val_s else train_s
        preds = predict_angles(main, timing, val_set, masks)
        val_rmse = rmse(preds, [s.angle_label for s in val_set])
        _check_finite(val_rmse)
        if stopper.update(val_rmse, main.state_dict()):
            break
    if stopper.best_state is not None:
        main.load_state_dict(stopper.best_state)
    return main


def finetune(
    bundle: ModelBundle,
    samples: list[WindowSample],
    masks: dict[str, ActivationMask] | None,
    tc: TrainConfig = TrainConfig(),
) -> ModelBundle:
    """Step 3: adapt all parameters on a short calibration recording at a
    fixed low learning rate for a fixed number of epochs (no early stop)."""
    rng_shuffle, rng_jitter = _rngs(tc.seed + 1, 2)
    flags = bundle.flags
    needs_mask = flags.activation_aux or flags.mask_filter

    if bundle.timing is not None and tc.finetune_timing:
        opt_t = Adam(bundle.timing.parameters(), lr=tc.finetune_lr, betas=tc.betas)
        x_all = stack_inputs(samples)
        t_all = _timing_targets(samples)
        for _ in range(tc.finetune_epochs):
            bundle.timing.train()
            for chunk in _batches(len(samples), tc.batch_size, rng_shuffle):
                pred = bundle.timing(Tensor(x_all[chunk]))
                loss = timing_loss(pred, t_all[chunk], tc.timing_loss_mode)
                _check_finite(loss.item())
                opt_t.zero_grad()
                loss.backward()
                opt_t.step()

    opt = Adam(bundle.main.parameters(), lr=tc.finetune_lr, betas=tc.betas)
    for _ in range(tc.finetune_epochs):
        epoch_s = _epoch_views(samples, masks, flags, tc.jitter_sd, rng_jitter) if needs_mask else samples
        x = stack_inputs(epoch_s)
        if flags.mask_filter:
            w = _filter_weights(epoch_s, masks, win=x.shape[2])
            x = (x * w[:, None, :, :]).astype(x.dtype)
        labels = {
            "pattern": np.array([s.pattern_label for s in epoch_s]),
            "amplitude": np.array([s.amp_label for s in epoch_s]),
            "angle": np.array([s.angle_label for s in epoch_s]),
            "mask": np.stack([s.mask_target for s in epoch_s]),
        }
        bundle.main.train()
        for chunk in _batches(len(epoch_s), tc.batch_size, rng_shuffle):
            out = bundle.main(Tensor(x[chunk]))
            loss, _ = main_loss(out, {k: v[chunk] for k, v in labels.items()}, tc.alpha, flags)
            _check_finite(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return bundle


def evaluate(
    bundle: ModelBundle,
    samples: list[WindowSample],
    masks: dict[str, ActivationMask] | None,
) -> dict:
    """Angle metrics overall and per (subject, speed) group."""
    preds = predict_angles(bundle.main, bundle.timing, samples, masks)
    labels = np.array([s.angle_label for s in samples])
    report = {"n": len(samples), "overall": metrics(preds, labels), "groups": {}}
    keys = sorted({(s.subject_id, s.speed) for s in samples})
    for subj, speed in keys:
        sel = [i for i, s in enumerate(samples) if s.subject_id == subj and s.speed == speed]
        if len(sel) >= 2:
            report["groups"][f"{subj}|{speed}"] = metrics(preds[sel], labels[sel])
    return report
