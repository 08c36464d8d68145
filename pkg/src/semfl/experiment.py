"""End-to-end experiment runner."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import esc
from .config import ExperimentConfig
from .data import load_dataset
from .engine import DeviceState, EngineConfig, derive_seed, init_state, run_round
from .errors import EmptyRoundError
from .metrics import compute_metrics
from .model import Architecture, ChannelSpec, SCModel, init_params, save_model
from .network import DeviceProfile, db_to_linear, dbm_to_watt

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "global_loss", "acc", "pre", "spe", "f1", "rec", "round_delay_s", "objective", "participants")
DELAY_COLUMNS = (
    "round", "device", "volume", "cluster", "zeta", "frozen", "trainable",
    "d_up_s", "d_down_s", "d_comp_s", "d_total_s", "participated",
)


def engine_config(cfg):
    return EngineConfig(
        local_epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size, d_max=cfg.d_max,
        act_enabled=cfg.act_enabled, clusters=cfg.clusters, seed=cfg.seed,
        channel_jitter=cfg.channel_jitter, jitter_std_db=cfg.jitter_std_db,
        fisher_samples=cfg.fisher_samples, workers=cfg.workers,
    )


def device_profile(cfg, n):
    v = lambda name: cfg.device_value(name, n)  # noqa: E731
    return DeviceProfile(
        cpu_freq_hz=v("cpu_freq_hz"), channel_index=n, p_up_w=v("p_up_w"), p_down_w=v("p_down_w"),
        b_up_hz=v("b_up_hz"), b_down_hz=v("b_down_hz"), gain=db_to_linear(v("gain_db")),
        interference_up_w=v("interference_up_w"), interference_down_w=v("interference_down_w"),
        noise_psd_w_hz=dbm_to_watt(v("noise_dbm_hz")), kappa=v("kappa"),
    )


def device_channel(cfg, n):
    return ChannelSpec(gain=cfg.device_value("channel_gain", n), noise_std=cfg.device_value("noise_std", n))


def test_channel(cfg):
    return ChannelSpec(gain=cfg.table_mean("channel_gain"), noise_std=cfg.table_mean("noise_std"))


def build(cfg):
    """Data, model and initial federation state for a config."""
    data = load_dataset(cfg, lambda tag: derive_seed(cfg.seed, tag))
    labels = np.concatenate([d.y for d in data.devices] + [data.test.y])
    arch = Architecture(
        image_shape=data.test.x.shape[1:], semantic_dim=cfg.semantic_dim,
        num_classes=max(2, int(labels.max()) + 1),
    )
    model = SCModel(arch)
    devices = [
        DeviceState(n, d.x, d.y, device_profile(cfg, n), device_channel(cfg, n))
        for n, d in enumerate(data.devices)
    ]
    state = init_state(model, devices, init_params(arch, derive_seed(cfg.seed, "init")), engine_config(cfg))
    return data, model, state


def evaluate(model, params, test, chan, seed):
    pred = model.predict(test.x, params, chan, seed)
    return compute_metrics(pred, test.y, model.arch.num_classes)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    reports: list
    state: object
    data: object
    aborted: list = field(default_factory=list)
    explanations: list = field(default_factory=list)

    @property
    def model(self):
        return self.state.model

    @property
    def params(self):
        return self.state.global_params

    def mean_compute_delay(self):
        """Mean over rounds and participating devices of the local training delay."""
        vals = [r.delays.d_comp[r.delays.participants].mean() for r in self.reports]
        return float(np.mean(vals))


def run_experiment(cfg, out_dir=None, observer=None):
    """Run every round, then write metrics, delays, the final model and heatmaps."""
    data, model, state = build(cfg)
    ecfg = engine_config(cfg)
    tchan = test_channel(cfg)
    rows, aborted = [], []
    cumulative = 0.0
    for t in range(cfg.rounds):
        try:
            rep = run_round(state, ecfg, observer)
        except EmptyRoundError as exc:
            log.error("round %d aborted: %s", t, exc)
            aborted.append(t)
            state.round = t + 1
            continue
        cumulative += rep.round_delay
        m = evaluate(model, state.global_params, data.test, tchan, derive_seed(cfg.seed, t, "test"))
        row = {
            "round": t, "global_loss": rep.global_loss, **m, "round_delay_s": rep.round_delay,
            "objective": rep.global_loss + cfg.delay_weight * cumulative,
            "participants": int(rep.participants.sum()),
        }
        rows.append(row)
        log.info("round %d loss %.4f acc %.4f delay %.4fs", t, rep.global_loss, m["acc"], rep.round_delay)
    result = ExperimentResult(cfg, rows, state.reports, state, data, aborted)
    if cfg.esc_export:
        result.explanations = explain_test_images(result, cfg.esc_images)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def explain_test_images(result, limit):
    test = result.data.test
    idx = np.flatnonzero(test.y == 1)
    if idx.size == 0:
        idx = np.arange(len(test))
    idx = idx[:limit]
    if idx.size == 0:
        return []
    exps = esc.explain(result.model, result.params, test.x[idx], slope=result.config.slope)
    return list(zip([test.names[i] for i in idx], exps))


def write_outputs(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.txt").write_text(cfg.to_text())
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in result.rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    clustering = result.state.clustering
    with open(out / "delays.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DELAY_COLUMNS)
        n_params = len(result.params)
        for rep in result.reports:
            d = rep.delays
            for i, dev in enumerate(result.state.devices):
                w.writerow([_fmt(v) for v in (
                    rep.round, dev.id, dev.volume, int(clustering.assignment[i]), rep.zeta[i],
                    int(rep.frozen[i]), n_params - int(rep.frozen[i]),
                    d.d_up[i], d.d_down[i], d.d_comp[i], d.d_total[i], bool(rep.participants[i]),
                )])
    save_model(out / "model.scm", result.params, result.model.arch)
    summary = {
        "rounds_completed": len(result.rows),
        "aborted_rounds": result.aborted,
        "final": result.rows[-1] if result.rows else None,
        "mean_compute_delay_s": result.mean_compute_delay() if result.reports else None,
        "total_delay_s": float(sum(r.round_delay for r in result.reports)),
        "communication_bits": int(sum(r.delays.comm_bits for r in result.reports)),
        "volumes": list(result.data.volumes),
        "clusters": clustering.assignment.tolist(),
        "zeta": [float(z) for z in result.state.zeta],
        "num_params": len(result.params),
        "conventions": {
            "positive_class": 1,
            "undefined_ratio": "precision, recall, specificity and F1 are 0 when their denominator is 0",
            "objective": "global_loss + delay_weight * cumulative round delay",
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if result.explanations:
        for name, exp in result.explanations:
            esc.export_heatmaps(exp, name, out / "heatmaps")
