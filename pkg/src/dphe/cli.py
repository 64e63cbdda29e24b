"""Command-line driver.

Exit codes: 0 success, 2 configuration or input error, 3 security
assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import random
import sys
from pathlib import Path

import numpy as np

from . import attack, bench, paillier
from .fedlearn import PLAINTEXT, SECURE, TrainConfig, federated_train, load_dataset_csv, write_metrics_csv
from .protocol import MIN_USERS, ConfigError, ProtocolConfig, assert_transcript_secure, run_secure_average

EXIT_OK, EXIT_CONFIG, EXIT_INSECURE = 0, 2, 3

log = logging.getLogger("dphe")


class CliError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}") from e


def _require_seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise CliError("a seed is required: pass --seed or set 'seed' in the config")
    return int(seed)


def read_weights_csv(path) -> np.ndarray:
    """``N`` rows of ``D`` reals; a non-numeric first row is treated as a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}") from e
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise CliError(f"{path}: no weight rows")
    if len({len(r) for r in rows}) != 1:
        raise CliError(f"{path}: rows have differing lengths")
    try:
        return np.array([[float(v) for v in r] for r in rows])
    except ValueError as e:
        raise CliError(f"{path}: malformed value ({e})") from e


def write_vector_csv(path, w) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"w{i}" for i in range(len(w))])
        writer.writerow([repr(float(v)) for v in w])


# -- subcommands ---------------------------------------------------------------

def cmd_keygen(args) -> int:
    pk, sk = paillier.keygen(args.bits, random.Random(args.seed))
    if pk.insecure:
        log.warning("%d-bit keys are for testing only", args.bits)
    try:
        paillier.dump_keys(pk, sk, args.out_public, args.out_private)
    except OSError as e:
        raise CliError(f"cannot write keys: {e}") from e
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _read_json(args.config)
    seed = _require_seed(args, cfg)
    weights = read_weights_csv(args.weights_csv)
    N, D = weights.shape
    if cfg.get("N", N) != N or cfg.get("D", D) != D:
        raise CliError(f"config expects {cfg.get('N')}x{cfg.get('D')} weights, CSV holds {N}x{D}")
    if N < MIN_USERS:
        raise CliError(f"N={N} users: secure averaging requires N >= {MIN_USERS} "
                       "(with fewer users a participant can subtract its own input from the sum)")
    cfg = {"D": D, "N": N, "M": max(1, math.ceil(0.1 * D)), **cfg, "seed": seed}
    pcfg = ProtocolConfig.from_dict(cfg)
    w_bar, transcript = run_secure_average(pcfg, weights, random.Random(seed))
    out = Path(args.out)
    write_vector_csv(out, w_bar)
    transcript_path = Path(args.transcript) if args.transcript else out.with_suffix(".transcript.jsonl")
    transcript.write_jsonl(transcript_path)
    report = assert_transcript_secure(transcript)
    log.info("transcript audit: %s", report)
    if not report.passed:
        print(str(report), file=sys.stderr)
        return EXIT_INSECURE
    return EXIT_OK


def _load_training_data(data_dir: Path, n_users: int | None):
    init_path = data_dir / "init.csv"
    if not init_path.exists():
        raise CliError(f"missing {init_path}")
    paths = sorted(data_dir.glob("user*.csv"), key=lambda p: int(p.stem[4:]) if p.stem[4:].isdigit() else -1)
    expected = n_users if n_users is not None else len(paths)
    users = []
    for n in range(expected):
        p = data_dir / f"user{n}.csv"
        if not p.exists():
            raise CliError(f"missing {p}")
        users.append(load_dataset_csv(p))
    if not users:
        raise CliError(f"no user*.csv files in {data_dir}")
    return users, load_dataset_csv(init_path)


def cmd_train(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    seed = _require_seed(args, raw)
    config = TrainConfig.from_dict({**raw, "seed": seed})
    data_dir = Path(args.data_dir)
    users, init = _load_training_data(data_dir, raw.get("n_users"))
    if args.mode == SECURE and len(users) < MIN_USERS:
        raise CliError(f"secure mode requires N >= {MIN_USERS} users, found {len(users)}")
    eval_data = load_dataset_csv(data_dir / "test.csv") if (data_dir / "test.csv").exists() else None
    result = federated_train(users, init, config, mode=args.mode, eval_data=eval_data)
    write_metrics_csv(args.out, result.metrics, timing=args.timing)
    if args.model_out:
        with open(args.model_out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(
                [repr(float(v)) for v in row] for row in result.final.coef)
    final = result.metrics[-1]
    log.info("round %d accuracy %.4f sparsity %.3f", final.round, final.accuracy, final.sparsity)
    return EXIT_OK


def cmd_attack(args) -> int:
    X, y = load_dataset_csv(args.data)
    cfg = attack.AttackConfig(loss=args.loss, seed=args.seed if args.seed is not None else 0,
                              sample_index=args.sample)
    report = attack.attack_report(X, y, cfg)
    attack.write_report(report, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.reps < bench.MIN_REPS:
        raise CliError(f"--reps must be at least {bench.MIN_REPS}")
    records = []
    thread_counts = [1] if args.threads <= 1 else [1, bench.thread_cap(args.threads)]
    for D in args.dims:
        for s in args.sparsity:
            for th in thread_counts:
                records.append(bench.bench_encrypt(D, s, args.bits, args.reps, args.seed, threads=th))
        if args.dense:
            records.append(bench.bench_dense_encrypt(D, args.bits, args.reps, args.seed))
    bench.write_csv(records, args.out)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dphe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="generate a Paillier key pair")
    k.add_argument("--bits", type=int, default=paillier.DEFAULT_KEY_BITS, help="modulus size in bits")
    k.add_argument("--out-public", required=True, help="public key JSON path")
    k.add_argument("--out-private", required=True, help="private key JSON path")
    k.add_argument("--seed", type=int, default=None, help="seed for reproducible (test-only) keys")
    k.set_defaults(func=cmd_keygen)

    s = sub.add_parser("simulate", help="securely average the rows of a weights CSV")
    s.add_argument("--config", required=True, help="protocol config JSON {D, N, M, key_bits, ...}")
    s.add_argument("--weights-csv", required=True, help="N rows of D weights")
    s.add_argument("--out", required=True, help="averaged vector CSV")
    s.add_argument("--transcript", default=None, help="transcript JSON-lines path (default: next to --out)")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="federated training from per-user CSV files")
    t.add_argument("--data-dir", required=True, help="directory with init.csv and user0.csv..")
    t.add_argument("--config", default=None, help="training config JSON")
    t.add_argument("--mode", choices=(SECURE, PLAINTEXT), default=SECURE)
    t.add_argument("--out", required=True, help="per-round metrics CSV")
    t.add_argument("--model-out", default=None, help="optional final weights CSV")
    t.add_argument("--seed", type=int, default=None, help="required unless set in the config")
    t.add_argument("--timing", action="store_true", help="add the wallclock_encrypt_ms column")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="recover a training sample from one plaintext SGD step")
    a.add_argument("--loss", choices=("hinge", "logistic"), default="hinge")
    a.add_argument("--data", required=True, help="dataset CSV (label,f0..)")
    a.add_argument("--out", required=True, help="report JSON path")
    a.add_argument("--sample", type=int, default=None, help="row to attack (default: random)")
    a.add_argument("--seed", type=int, default=None)
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("bench", help="time sparse encryption")
    b.add_argument("--dims", type=int, nargs="+", default=[2048])
    b.add_argument("--sparsity", type=float, nargs="+", default=[0.0, 0.95])
    b.add_argument("--bits", type=int, default=paillier.DEFAULT_KEY_BITS)
    b.add_argument("--reps", type=int, default=bench.MIN_REPS)
    b.add_argument("--threads", type=int, default=1, help="also time parallel encryption (capped by DPHE_THREADS)")
    b.add_argument("--dense", action="store_true", help="include plain element-wise encryption")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="bench CSV path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ValueError) as e:
        print(f"dphe {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
