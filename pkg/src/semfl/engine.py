"""Synchronous federated training with per-device freeze masks.

One round: build freeze masks from the current global model, account the
delays each device would incur, train every device that fits the delay
budget on its published copy, then aggregate the participants weighted by
data volume.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import act
from .errors import ContractError, DivergedError, EmptyRoundError, ParameterError
from .model import ChannelSpec
from .network import DeviceProfile, delay_report, model_bits
from .params import ParamVector, check_same_manifest

log = logging.getLogger(__name__)


def derive_seed(seed, *keys):
    """Independent 63-bit seed for a (seed, keys...) stream."""
    words = [int(seed)] + [k if isinstance(k, int) else _word(k) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _word(text):
    return int.from_bytes(str(text).encode("utf8")[:8].ljust(8, b"\0"), "little") & 0x7FFFFFFF


@dataclass
class DeviceState:
    id: int
    x: np.ndarray
    y: np.ndarray
    profile: DeviceProfile = field(default_factory=DeviceProfile)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    params: ParamVector | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) < 1:
            raise ContractError(f"device {self.id}: dataset is empty")
        if len(self.x) != len(self.y):
            raise ContractError(f"device {self.id}: {len(self.x)} samples but {len(self.y)} labels")

    @property
    def volume(self):
        return len(self.y)


def local_loss(model, device, params, chan=None, seed=0):
    """Mean per-sample loss of ``params`` on the device's data."""
    if len(device.y) == 0:
        raise ContractError("dataset is empty")
    chan = device.channel if chan is None else chan
    return float(model.per_sample_losses(device.x, device.y, params, chan, seed).mean())


def sgd_step(w, grad, mask, lr):
    """One descent step that leaves masked entries untouched."""
    if mask is None:
        return w - lr * grad
    return np.where(mask, w, w - lr * grad)


def local_train(model, device, published, mask, epochs, lr, seed, batch_size=16, round_index=None):
    """Mini-batch SGD on the device's data starting from ``published``.

    Entries flagged in ``mask`` come back bit-identical to ``published``.
    """
    if epochs < 1:
        raise ParameterError("epochs must be >= 1")
    if not lr > 0:
        raise ParameterError("learning rate must be positive")
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    if mask is not None and mask.shape != published.values.shape:
        raise ContractError("mask length does not match the parameter vector")
    rng = np.random.default_rng(seed)
    w = published.values.copy()
    n = device.volume
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, grad = model.loss_and_grad(published.with_values(w), device.x[idx], device.y[idx], device.channel, rng)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergedError(
                    f"device {device.id}: non-finite loss in round {round_index}, epoch {epoch}",
                    round_index=round_index, epoch=epoch,
                )
            w = sgd_step(w, grad, mask, lr)
            if not np.all(np.isfinite(w)):
                raise DivergedError(
                    f"device {device.id}: parameters blew up in round {round_index}, epoch {epoch}",
                    round_index=round_index, epoch=epoch,
                )
    return ParamVector(w, published.manifest, published.round)


def aggregate(models):
    """Data-volume weighted mean of ``(volume, ParamVector)`` pairs."""
    models = list(models)
    if not models:
        raise ContractError("nothing to aggregate")
    check_same_manifest([p for _, p in models])
    total = float(sum(d for d, _ in models))
    if total <= 0:
        raise ContractError("total data volume must be positive")
    acc = np.zeros(len(models[0][1]))
    for d, p in models:
        acc += d * p.values
    return models[0][1].with_values(acc / total)


def global_loss(model, devices, w_global, seed=0):
    """Unweighted mean over devices of each device's loss at the global model."""
    if not devices:
        raise ContractError("need at least one device")
    return float(np.mean([local_loss(model, dev, w_global, seed=derive_seed(seed, dev.id)) for dev in devices]))


def publish(w_global, masks):
    """One (copy of the global model, freeze mask) pair per device."""
    return [(w_global.copy(), np.asarray(m, dtype=bool).copy()) for m in masks]


@dataclass
class EngineConfig:
    local_epochs: int = 2
    lr: float = 0.05
    batch_size: int = 16
    d_max: float = math.inf
    act_enabled: bool = True
    clusters: int = 3
    seed: int = 0
    channel_jitter: bool = False
    jitter_std_db: float = 4.0
    fisher_samples: int = 0
    workers: int = 1


@dataclass
class RoundReport:
    round: int
    global_loss: float
    delays: object
    participants: np.ndarray
    zeta: np.ndarray
    frozen: np.ndarray
    diverged: list

    @property
    def round_delay(self):
        return self.delays.round_delay


@dataclass
class FederationState:
    model: object
    devices: list
    global_params: ParamVector
    clustering: act.Clustering | None = None
    zeta: np.ndarray | None = None
    round: int = 0
    reports: list = field(default_factory=list)


def init_state(model, devices, global_params, config):
    volumes = [d.volume for d in devices]
    clustering = act.cluster_devices(volumes, min(config.clusters, len(devices)), seed=derive_seed(config.seed, "kmedoids"))
    zeta = act.device_proportions(volumes, clustering)
    return FederationState(model, list(devices), global_params.copy(round=0), clustering, zeta)


def freeze_masks(state, config):
    """Per-device freeze masks for the coming round.

    A device without a local model yet starts from the global model, so its
    importance is zero everywhere and the tie-break picks the frozen set. Ties
    are broken in a seeded random order: an index order would freeze the same
    leading layers on every device, and parameters nobody trains keep zero
    importance, so they would stay frozen for good.
    """
    n_params = len(state.global_params)
    masks = []
    for i, dev in enumerate(state.devices):
        if not config.act_enabled:
            masks.append(np.zeros(n_params, dtype=bool))
            continue
        if dev.params is None:
            scores = np.zeros(n_params)
        else:
            fisher = act.empirical_fisher(
                state.model, dev, dev.params,
                seed=derive_seed(config.seed, state.round, dev.id, "fisher"),
                max_samples=config.fisher_samples,
            )
            scores = act.importance(state.global_params, dev.params, fisher)
        tiebreak = derive_seed(config.seed, state.round, dev.id, "tiebreak")
        masks.append(act.select_and_freeze(scores, float(state.zeta[i]), seed=tiebreak))
    return masks


def run_round(state, config, observer=None):
    """Advance the federation by one round and return its report.

    ``observer(device, published, mask, trained)`` is called for every device
    that finished local training.
    """
    t = state.round
    w_g = state.global_params
    n_params = len(w_g)
    masks = freeze_masks(state, config)
    frozen = np.array([int(m.sum()) for m in masks])

    profiles = [d.profile for d in state.devices]
    if config.channel_jitter:
        rng = np.random.default_rng(derive_seed(config.seed, t, "jitter"))
        profiles = [p.jittered(rng, config.jitter_std_db) for p in profiles]
    delays = delay_report(
        profiles, [d.volume for d in state.devices], n_params - frozen,
        model_bits(w_g), config.local_epochs, config.d_max, round_index=t,
    )

    published = publish(w_g, masks)
    eligible = [i for i, ok in enumerate(delays.participants) if ok]

    def train(i):
        dev = state.devices[i]
        pub, mask = published[i]
        try:
            return local_train(
                state.model, dev, pub, mask, config.local_epochs, config.lr,
                derive_seed(config.seed, t, dev.id, "train"), config.batch_size, round_index=t,
            )
        except DivergedError as exc:
            log.warning("%s; device sits this round out", exc)
            return None

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(train, eligible))
    else:
        results = [train(i) for i in eligible]

    participants = np.zeros(len(state.devices), dtype=bool)
    diverged = []
    for i, trained in zip(eligible, results):
        dev = state.devices[i]
        if trained is None:
            diverged.append(dev.id)
            continue
        if observer is not None:
            observer(dev, published[i][0], published[i][1], trained)
        dev.params = trained
        dev.mask = published[i][1]
        participants[i] = True
    if not participants.any():
        raise EmptyRoundError(t)

    new_global = aggregate([(state.devices[i].volume, state.devices[i].params) for i in np.flatnonzero(participants)])
    new_global.round = t + 1
    state.global_params = new_global
    loss = global_loss(state.model, state.devices, new_global, seed=derive_seed(config.seed, t, "global_loss"))
    report = RoundReport(t, loss, delays, participants, state.zeta.copy(), frozen, diverged)
    state.reports.append(report)
    state.round = t + 1
    return report
