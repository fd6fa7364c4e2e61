"""Experiment driver.

Verbs:
  prepare-data   build the per-device dataset cache (synthetic or CSV trees)
  train          run one training mode (fl, cl-single, cl-combined) and
                 write a run directory with report, metrics, model, threshold
  evaluate       re-score a saved model and threshold against a cache
  report         render comparison and timing tables from run reports
  broker         stand-alone message broker process
  server         federation server process (attaches to a broker)
  client         federation client process (attaches to a broker)

Configuration precedence: command line flag > config file (INI, flat
key = value entries in any section) > profile > built-in default. The
`full` profile pins the reference regimen (30 rounds, 120 local epochs,
batch 64, alpha 3, tanh); the `fast` profile shrinks it for CI.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 transport
error, 5 training divergence, 1 anything else.
"""

import argparse
import configparser
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from fedanom import anomaly, nn
from fedanom.data import (build_global_testset, file_sha256,
                          generate_synthetic_corpus, load_dataset,
                          load_device_csv, prepare_corpus, save_dataset)
from fedanom.errors import (ConfigError, DataError, FedAnomError,
                            TrainingDivergedError, TransportError)
from fedanom.federation import (ClientManager, FederationConfig,
                                ServerManager, run_combined, run_federated,
                                run_single_device, score_mse)
from fedanom.transport import (TcpBackend, TcpBroker, decode_model,
                               encode_model)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4
EXIT_DIVERGED = 5

DATA_ROOT_ENV = "FEDANOM_DATA_ROOT"

MODES = ("fl", "cl-single", "cl-combined")
DATASETS = ("synthetic", "nbaiot")
TRANSPORTS = ("loopback", "tcp")
PROFILES = {
    # the full regimen is the reference configuration; these five keys are
    # pinned and may not be overridden while the profile is selected
    "full": {"total_rounds": 30, "local_epochs": 120, "batch_size": 64,
             "alpha": 3.0, "activation": "tanh"},
    "fast": {"total_rounds": 5, "local_epochs": 5},
}


@dataclasses.dataclass
class ExperimentConfig:
    mode: str = "fl"
    dataset: str = "synthetic"
    data_root: str = ""
    cache_dir: str = ""
    output_dir: str = "runs"
    run_id: str = ""
    profile: str = "fast"
    transport: str = "loopback"
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    attach_broker: bool = False
    seed: int = 0
    n_clients: int = 9
    total_rounds: int = 30
    local_epochs: int = 120
    batch_size: int = 64
    alpha: float = 3.0
    eta_max: float = 1e-3
    eta_min: float = 0.0
    input_dim: int = 115
    activation: str = "tanh"
    activate_output: bool = True
    message_delay: float = 0.0
    timeout: float = 60.0
    round_eval: bool = False
    devices: str = ""
    name: str = ""


_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = dataclasses.asdict(ExperimentConfig())
_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    if kind == "bool" or kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat key = value entries; sections are organizational only."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_string("[defaults]\n" + fh.read(), source=str(path))
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from None
    except configparser.Error as err:
        raise ConfigError(f"bad config file {path}: {err}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown setting {key!r}")
            values[key] = _coerce(key, raw)
    return values


def resolve_config(cli_values: dict) -> ExperimentConfig:
    """Merge defaults, profile, config file, and flags, then validate."""
    file_values = {}
    config_path = cli_values.pop("config", None)
    if config_path:
        file_values = read_config_file(config_path)
    explicit = dict(file_values)
    explicit.update({k: v for k, v in cli_values.items() if v is not None})

    profile = explicit.get("profile", _DEFAULTS["profile"])
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; "
                          f"choose from {sorted(PROFILES)}")
    merged = dict(_DEFAULTS)
    merged.update(PROFILES[profile])
    merged.update(explicit)

    if profile == "full":
        for key, pinned in PROFILES["full"].items():
            if key in explicit and explicit[key] != pinned:
                raise ConfigError(
                    f"profile 'full' pins {key}={pinned}; "
                    f"remove the conflicting override ({explicit[key]})")

    cfg = ExperimentConfig(**merged)
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; choose from {MODES}")
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; "
                          f"choose from {DATASETS}")
    if cfg.transport not in TRANSPORTS:
        raise ConfigError(f"unknown transport {cfg.transport!r}; "
                          f"choose from {TRANSPORTS}")
    if not (0 <= cfg.seed < 2 ** 64):
        raise ConfigError("seed must fit in 64 bits")
    if cfg.message_delay < 0:
        raise ConfigError("message_delay must be non-negative")
    if cfg.timeout <= 0:
        raise ConfigError("timeout must be positive")
    if not cfg.data_root:
        cfg.data_root = os.environ.get(DATA_ROOT_ENV, "data")
    if not cfg.cache_dir:
        cfg.cache_dir = str(Path(cfg.data_root) / "cache" / cfg.dataset)
    if not cfg.run_id:
        cfg.run_id = f"{cfg.mode}-{cfg.dataset}-{cfg.transport}-s{cfg.seed}"
    return cfg


def to_federation_config(cfg: ExperimentConfig) -> FederationConfig:
    return FederationConfig(
        n_clients=cfg.n_clients,
        total_rounds=cfg.total_rounds,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        alpha=cfg.alpha,
        schedule=nn.LrSchedule(eta_max=cfg.eta_max, eta_min=cfg.eta_min,
                               total_rounds=cfg.total_rounds),
        model=nn.AutoencoderConfig(input_dim=cfg.input_dim,
                                   activation=cfg.activation,
                                   activate_output=cfg.activate_output),
    )


# ---------------------------------------------------------------------------
# dataset cache

def _device_bin(cache_dir, device_id) -> Path:
    return Path(cache_dir) / f"{device_id}.bin"


def load_cached_devices(cache_dir):
    """Load every cached device, newest schema checks included.

    Returns (datasets sorted by device id, shared normalization bounds,
    {device_id: content hash}).
    """
    root = Path(cache_dir)
    paths = sorted(root.glob("*.bin"))
    if not paths:
        raise DataError(f"no cached devices under {root}; "
                        f"run prepare-data first")
    datasets = []
    stats = None
    hashes = {}
    for path in paths:
        dataset, these = load_dataset(path)
        if stats is None:
            stats = these
        elif not (np.array_equal(stats.min_vec, these.min_vec)
                  and np.array_equal(stats.max_vec, these.max_vec)):
            raise DataError(
                f"{path.name}: normalization bounds differ from the other "
                f"cache files; the cache mixes prepare-data runs")
        datasets.append(dataset)
        hashes[dataset.device_id] = file_sha256(path)
    datasets.sort(key=lambda d: d.device_id)
    return datasets, stats, hashes


def cmd_prepare_data(cfg: ExperimentConfig) -> int:
    if cfg.dataset == "synthetic":
        raws = generate_synthetic_corpus(cfg.n_clients, seed=cfg.seed)
    else:
        root = Path(cfg.data_root)
        if not root.is_dir():
            raise DataError(f"data root {root} does not exist")
        found = sorted(p.name for p in root.iterdir() if p.is_dir()
                       and p.name != "cache")
        wanted = ([d.strip() for d in cfg.devices.split(",") if d.strip()]
                  if cfg.devices else found)
        missing = sorted(set(wanted) - set(found))
        if missing:
            raise DataError(f"missing device directories under {root}: "
                            f"{', '.join(missing)}")
        if not wanted:
            raise DataError(f"no device directories under {root}")
        raws = []
        for device_id in wanted:
            paths = sorted((root / device_id).glob("*.csv"))
            raws.append(load_device_csv(paths, device_id))

    datasets, stats = prepare_corpus(raws, seed=cfg.seed)
    out = Path(cfg.cache_dir)
    out.mkdir(parents=True, exist_ok=True)
    for dataset in datasets:
        path = _device_bin(out, dataset.device_id)
        save_dataset(path, dataset, stats)
        manifest = {
            "device_id": dataset.device_id,
            "dataset": cfg.dataset,
            "seed": cfg.seed,
            "train_rows": dataset.train.shape[0],
            "eval_rows": dataset.eval.shape[0],
            "test_rows": dataset.test_features.shape[0],
            "sha256": file_sha256(path),
        }
        text = "".join(f"{k}: {manifest[k]}\n" for k in sorted(manifest))
        Path(str(path) + ".manifest").write_text(text, encoding="utf-8")
        print(f"{dataset.device_id}: train={dataset.train.shape[0]} "
              f"eval={dataset.eval.shape[0]} "
              f"test={dataset.test_features.shape[0]}")
    print(f"cached {len(datasets)} devices under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run outputs

def _format_section(name, pairs) -> str:
    lines = [f"[{name}]"]
    for key, value in pairs:
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def format_metrics_line(fields: dict) -> str:
    return " ".join(f"{k}={fields[k]}" for k in fields) + "\n"


def parse_metrics_line(line: str) -> dict:
    out = {}
    for token in line.split():
        if "=" not in token:
            raise ConfigError(f"malformed metrics token {token!r}")
        key, raw = token.split("=", 1)
        try:
            value = float(raw)
        except ValueError:
            value = raw
        out[key] = value
    return out


def write_run_outputs(cfg, metrics, threshold, model, manifest_hashes,
                      wall_seconds, stats=None, per_device=None):
    run_dir = Path(cfg.output_dir) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    sections = [_format_section("config", sorted(
        dataclasses.asdict(cfg).items()))]
    sections.append(_format_section("data", sorted(manifest_hashes.items())))
    sections.append(_format_section("metrics", [
        ("acc", repr(metrics.acc)), ("fpr", repr(metrics.fpr)),
        ("tpr", repr(metrics.tpr)), ("tnr", repr(metrics.tnr))]))
    sections.append(_format_section("threshold", [
        ("tr", repr(threshold.tr)), ("mean_mse", repr(threshold.mean_mse)),
        ("std_mse", repr(threshold.std_mse)), ("alpha", repr(threshold.alpha)),
        ("n_samples", threshold.n_samples)]))

    timing = [("wall_seconds", repr(wall_seconds))]
    if stats is not None:
        comm, compute, agg = stats.totals()
        r_comm, r_compute, r_agg = stats.ratios()
        timing += [
            ("comm_seconds", repr(comm)), ("compute_seconds", repr(compute)),
            ("agg_seconds", repr(agg)), ("ratio_comm", repr(r_comm)),
            ("ratio_compute", repr(r_compute)), ("ratio_agg", repr(r_agg)),
            ("bytes_client_to_server", stats.bytes_client_to_server),
            ("bytes_server_to_client", stats.bytes_server_to_client),
        ]
    sections.append(_format_section("timing", timing))

    if stats is not None and stats.round_mean_loss:
        rows = [(f"train_r{i:03d}", repr(v))
                for i, v in enumerate(stats.round_mean_loss)]
        rows += [(f"eval_r{i:03d}", repr(v))
                 for i, v in enumerate(stats.round_eval_loss)]
        sections.append(_format_section("loss", rows))
    if per_device:
        rows = [(device, f"acc={m.acc!r} fpr={m.fpr!r} tpr={m.tpr!r} "
                         f"tnr={m.tnr!r} tr={tr.tr!r}")
                for device, (m, tr) in sorted(per_device.items())]
        sections.append(_format_section("per-device", rows))

    (run_dir / "report.txt").write_text("\n".join(sections), encoding="utf-8")

    line = format_metrics_line({
        "mode": cfg.mode, "dataset": cfg.dataset, "profile": cfg.profile,
        "transport": cfg.transport, "seed": cfg.seed,
        "acc": repr(metrics.acc), "fpr": repr(metrics.fpr),
        "tpr": repr(metrics.tpr), "tnr": repr(metrics.tnr),
        "tr": repr(threshold.tr), "wall_seconds": repr(wall_seconds),
    })
    (run_dir / "metrics.line").write_text(line, encoding="utf-8")
    (run_dir / "model.bin").write_bytes(encode_model(model))
    (run_dir / "threshold.txt").write_text(
        _format_section("threshold", [
            ("tr", repr(threshold.tr)),
            ("mean_mse", repr(threshold.mean_mse)),
            ("std_mse", repr(threshold.std_mse)),
            ("alpha", repr(threshold.alpha)),
            ("n_samples", threshold.n_samples)]), encoding="utf-8")
    return run_dir


def parse_report(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"cannot read report {path}")
    return parser


def _mean_metrics(per_metrics):
    return anomaly.Metrics(
        acc=float(np.mean([m.acc for m in per_metrics])),
        fpr=float(np.mean([m.fpr for m in per_metrics])),
        tpr=float(np.mean([m.tpr for m in per_metrics])),
        tnr=float(np.mean([m.tnr for m in per_metrics])),
    )


def cmd_train(cfg: ExperimentConfig) -> int:
    devices, _, hashes = load_cached_devices(cfg.cache_dir)
    if len(devices) != cfg.n_clients:
        raise ConfigError(
            f"cache holds {len(devices)} devices but n_clients is "
            f"{cfg.n_clients}; adjust --n-clients or re-run prepare-data")
    fed = to_federation_config(cfg)
    t0 = time.perf_counter()
    per_device = None
    stats = None

    if cfg.mode == "fl":
        broker = ((cfg.broker_host, cfg.broker_port)
                  if cfg.attach_broker else None)
        model, report, metrics, stats = run_federated(
            fed, devices, transport=cfg.transport, seed=cfg.seed,
            message_delay=cfg.message_delay, broker_address=broker,
            run_id=cfg.run_id, timeout=cfg.timeout,
            eval_each_round=cfg.round_eval)
        threshold = report.tr_global
    elif cfg.mode == "cl-combined":
        model, threshold, metrics = run_combined(devices, fed, seed=cfg.seed)
    else:
        testset = build_global_testset(devices)
        per_device = {}
        models = {}
        for device in devices:
            dev_model, tr, met = run_single_device(device, fed, seed=cfg.seed,
                                                   testset=testset)
            per_device[device.device_id] = (met, tr)
            models[device.device_id] = dev_model
        metrics = _mean_metrics([m for m, _ in per_device.values()])
        # the saved artifacts describe the first device; the averaged
        # numbers and per-device rows live in the report
        first = min(per_device)
        model = models[first]
        threshold = per_device[first][1]

    wall = time.perf_counter() - t0
    run_dir = write_run_outputs(cfg, metrics, threshold, model, hashes, wall,
                                stats=stats, per_device=per_device)
    print(f"mode={cfg.mode} acc={metrics.acc:.4f} fpr={metrics.fpr:.4f} "
          f"tpr={metrics.tpr:.4f} tnr={metrics.tnr:.4f}")
    print(f"outputs: {run_dir}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, run_dir) -> int:
    run_dir = Path(run_dir)
    report_path = run_dir / "report.txt"
    model_path = run_dir / "model.bin"
    if not report_path.is_file() or not model_path.is_file():
        raise DataError(f"{run_dir} is not a run directory "
                        f"(need report.txt and model.bin)")
    report = parse_report(report_path)
    if not all(report.has_section(s) for s in
               ("config", "threshold", "metrics")):
        raise DataError(f"{report_path} is missing report sections")
    saved = report["config"]
    model_config = nn.AutoencoderConfig(
        input_dim=saved.getint("input_dim"),
        activation=saved.get("activation"),
        activate_output=saved.getboolean("activate_output"))
    model = decode_model(model_path.read_bytes(), model_config)
    tr = anomaly.DetectionThreshold(
        tr=float(report["threshold"]["tr"]),
        mean_mse=float(report["threshold"]["mean_mse"]),
        std_mse=float(report["threshold"]["std_mse"]),
        alpha=float(report["threshold"]["alpha"]),
        n_samples=int(report["threshold"]["n_samples"]))

    cache = cfg.cache_dir if cfg.cache_dir else saved.get("cache_dir")
    devices, _, _ = load_cached_devices(cache)
    features, labels = build_global_testset(devices)
    pred = anomaly.detect(score_mse(model, features), tr)
    metrics = anomaly.metrics(anomaly.confusion(pred, labels))

    print(f"acc={metrics.acc:.6f} fpr={metrics.fpr:.6f} "
          f"tpr={metrics.tpr:.6f} tnr={metrics.tnr:.6f}")
    stored = report["metrics"]
    drift = max(abs(metrics.acc - stored.getfloat("acc")),
                abs(metrics.tpr - stored.getfloat("tpr")))
    print(f"stored acc={stored.getfloat('acc'):.6f} (max drift {drift:.2e})")
    return EXIT_OK


_TABLE_ORDER = {"cl-single": 0, "cl-combined": 1, "fl": 2}


def cmd_report(paths) -> int:
    if not paths:
        raise ConfigError("need at least one report")
    reports = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            path = path / "report.txt"
        rep = parse_report(path)
        if not (rep.has_section("config") and rep.has_section("metrics")
                and rep.has_section("timing")):
            raise DataError(f"{path} is missing report sections")
        reports.append((str(path), rep))

    baseline = dict(reports[0][1]["data"]) if reports[0][1].has_section(
        "data") else {}
    for path, rep in reports[1:]:
        other = dict(rep["data"]) if rep.has_section("data") else {}
        if other != baseline:
            raise ConfigError(
                f"{path}: dataset manifest differs from {reports[0][0]}; "
                f"reports describe different data")

    reports.sort(key=lambda item: (
        _TABLE_ORDER.get(item[1]["config"].get("mode"), 9), item[0]))

    print(f"{'mode':<14}{'acc%':>8}{'fpr%':>8}{'tpr%':>8}{'tnr%':>8}")
    for _, rep in reports:
        m = rep["metrics"]
        print(f"{rep['config'].get('mode'):<14}"
              f"{100 * m.getfloat('acc'):>8.2f}"
              f"{100 * m.getfloat('fpr'):>8.2f}"
              f"{100 * m.getfloat('tpr'):>8.2f}"
              f"{100 * m.getfloat('tnr'):>8.2f}")

    print()
    print(f"{'mode':<14}{'end-to-end s':>14}{'comm%':>8}{'compute%':>10}"
          f"{'agg%':>7}{'MB up':>9}{'MB down':>9}")
    for _, rep in reports:
        timing = rep["timing"]
        mode = rep["config"].get("mode")
        wall = timing.getfloat("wall_seconds")
        if timing.get("ratio_comm", fallback=None) is None:
            print(f"{mode:<14}{wall:>14.2f}{'-':>8}{'-':>10}{'-':>7}"
                  f"{'-':>9}{'-':>9}")
            continue
        up = timing.getint("bytes_client_to_server") / 1e6
        down = timing.getint("bytes_server_to_client") / 1e6
        print(f"{mode:<14}{wall:>14.2f}"
              f"{100 * timing.getfloat('ratio_comm'):>8.2f}"
              f"{100 * timing.getfloat('ratio_compute'):>10.2f}"
              f"{100 * timing.getfloat('ratio_agg'):>7.2f}"
              f"{up:>9.2f}{down:>9.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# long-running processes

def cmd_broker(cfg: ExperimentConfig) -> int:
    broker = TcpBroker(host=cfg.broker_host, port=cfg.broker_port).start()
    print(f"broker listening on {broker.host}:{broker.port}", flush=True)
    try:
        broker.serve_forever(poll_seconds=0.2)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_OK


def cmd_server(cfg: ExperimentConfig) -> int:
    devices, _, hashes = load_cached_devices(cfg.cache_dir)
    if len(devices) != cfg.n_clients:
        raise ConfigError(
            f"cache holds {len(devices)} devices but n_clients is "
            f"{cfg.n_clients}")
    backend = TcpBackend(cfg.broker_host, cfg.broker_port)
    try:
        manager = ServerManager(backend, cfg.run_id, to_federation_config(cfg),
                                devices, cfg.seed,
                                default_timeout=cfg.timeout,
                                eval_each_round=cfg.round_eval)
        print(f"server waiting for {cfg.n_clients} clients "
              f"(run {cfg.run_id})", flush=True)
        model, report, metrics, stats = manager.run()
    finally:
        backend.close()
    run_dir = write_run_outputs(cfg, metrics, report.tr_global, model, hashes,
                                stats.wall_seconds, stats=stats)
    print(f"acc={metrics.acc:.4f} tpr={metrics.tpr:.4f}")
    print(f"outputs: {run_dir}")
    return EXIT_OK


def cmd_client(cfg: ExperimentConfig) -> int:
    name = cfg.name or f"client-{os.getpid()}"
    cache = Path(cfg.cache_dir)

    def resolve(device_id):
        path = _device_bin(cache, device_id)
        if not path.is_file():
            raise DataError(f"assigned device {device_id!r} has no cache "
                            f"file under {cache}")
        return load_dataset(path)[0]

    backend = TcpBackend(cfg.broker_host, cfg.broker_port)
    try:
        manager = ClientManager(backend, cfg.run_id, name,
                                to_federation_config(cfg), resolve, cfg.seed,
                                default_timeout=cfg.timeout)
        print(f"client {name} joined run {cfg.run_id}", flush=True)
        manager.run()
    finally:
        backend.close()
    device = manager.device.device_id if manager.device else "-"
    print(f"client {name} done (device {device})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_flags(parser):
    g = parser.add_argument_group("experiment settings")
    g.add_argument("--config", help="INI config file (flags override it)")
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--dataset", choices=DATASETS)
    g.add_argument("--data-root", dest="data_root")
    g.add_argument("--cache-dir", dest="cache_dir")
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("--run-id", dest="run_id")
    g.add_argument("--profile", choices=sorted(PROFILES))
    g.add_argument("--transport", choices=TRANSPORTS)
    g.add_argument("--broker-host", dest="broker_host")
    g.add_argument("--broker-port", dest="broker_port", type=int)
    g.add_argument("--attach-broker", dest="attach_broker",
                   action="store_const", const=True,
                   help="use an already-running broker for tcp training")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-clients", dest="n_clients", type=int)
    g.add_argument("--rounds", dest="total_rounds", type=int)
    g.add_argument("--epochs", dest="local_epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--eta-max", dest="eta_max", type=float)
    g.add_argument("--eta-min", dest="eta_min", type=float)
    g.add_argument("--input-dim", dest="input_dim", type=int)
    g.add_argument("--activation", choices=("tanh", "sigmoid"))
    g.add_argument("--message-delay", dest="message_delay", type=float,
                   help="injected per-message delay in seconds (loopback)")
    g.add_argument("--timeout", type=float,
                   help="transport wait limit in seconds")
    g.add_argument("--round-eval", dest="round_eval", action="store_const",
                   const=True, help="record a per-round eval loss curve")
    g.add_argument("--devices",
                   help="comma-separated device directories (prepare-data)")
    g.add_argument("--name", help="client name (client verb)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedanom",
        description="Federated anomaly detection for device traffic")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb, help_text in [
        ("prepare-data", "build the per-device dataset cache"),
        ("train", "run one training mode and write a run directory"),
        ("broker", "run a stand-alone message broker"),
        ("server", "run the federation server against a broker"),
        ("client", "run one federation client against a broker"),
    ]:
        p = sub.add_parser(verb, help=help_text)
        _add_config_flags(p)

    p = sub.add_parser("evaluate", help="re-score a saved run")
    p.add_argument("run_dir", help="run directory with report.txt, model.bin")
    _add_config_flags(p)

    p = sub.add_parser("report", help="render comparison tables")
    p.add_argument("reports", nargs="+",
                   help="run directories or report.txt paths")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    verb = args.verb
    try:
        if verb == "report":
            return cmd_report(args.reports)
        values = {k: v for k, v in vars(args).items()
                  if k in _FIELDS or k == "config"}
        cfg = resolve_config(values)
        if verb == "prepare-data":
            return cmd_prepare_data(cfg)
        if verb == "train":
            return cmd_train(cfg)
        if verb == "evaluate":
            return cmd_evaluate(cfg, args.run_dir)
        if verb == "broker":
            return cmd_broker(cfg)
        if verb == "server":
            return cmd_server(cfg)
        if verb == "client":
            return cmd_client(cfg)
        raise ConfigError(f"unknown verb {verb!r}")
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TRANSPORT
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except FedAnomError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
