"""Unified command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Log level comes from the HOMEAUTH_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import DataError, __version__
from .ingest import DeviceRegistry, annotate_domains, read_records
from .pcap import parse_pcap
from .sessions import generate_windows, read_sessions
from .features import (
    FeatureSchema,
    KIND_BOTH,
    KIND_DEVICE,
    KIND_DOMAIN,
    build_domain_vocab,
    extract,
    load_schema,
    read_features_csv,
    save_schema,
    write_features_csv,
)
from .models import TrainingSet, load_model, save_model
from .ensemble import EnsembleModel
from .evaluation import ExperimentConfig, fit_model, load_config_file, run_experiment
from .simulate import generate_corpus, load_corpus_spec, write_corpus
from .server import ScoringServer, score_to_json
from .stream import StreamScorer, score_stream

log = logging.getLogger("homeauth")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_usage(message))

    def exit_usage(self, message) -> int:
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return EXIT_USAGE


def _schema_path_for(features_path: str) -> str:
    base, _ = os.path.splitext(features_path)
    return base + ".schema.json"


def cmd_convert(args) -> int:
    registry = DeviceRegistry.from_json(args.registry)
    records, dnsmap, stats = parse_pcap(args.pcap, registry)
    annotated = list(annotate_domains(records, dnsmap))
    from .ingest import write_records

    write_records(args.out, annotated)
    if args.dns_out:
        doc = [
            {"first_seen": ts, "ip": ip, "fqdn": fqdn} for ts, ip, fqdn in dnsmap.entries
        ]
        with open(args.dns_out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    print(stats.summary())
    return EXIT_OK


def cmd_extract(args) -> int:
    records = sorted(read_records(args.records), key=lambda r: r.timestamp)
    sessions = read_sessions(args.sessions)
    windows = []
    for s in sessions:
        windows.extend(generate_windows(s, records, args.delta * 60.0, args.stride))

    if args.schema:
        schema = load_schema(args.schema)
        if schema.kind != args.repr:
            raise DataError(
                f"schema kind {schema.kind!r} does not match --repr {args.repr!r}"
            )
    else:
        device_order: tuple[str, ...] = ()
        if args.repr in (KIND_DEVICE, KIND_BOTH):
            if not args.registry:
                raise DataError("--registry is required for device feature extraction")
            device_order = DeviceRegistry.from_json(args.registry).device_order
        vocab = build_domain_vocab(windows) if args.repr in (KIND_DOMAIN, KIND_BOTH) else ()
        schema = FeatureSchema(args.repr, device_order=device_order, domain_vocab=vocab)

    vectors = extract(windows, schema)
    write_features_csv(args.out, vectors, schema)
    save_schema(_schema_path_for(args.out), schema)
    print(f"wrote {len(vectors)} feature rows of width {schema.width} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    schema_path = args.schema or _schema_path_for(args.features)
    schema = load_schema(schema_path)
    columns, X, labels, _ = read_features_csv(args.features)
    if columns != schema.column_names():
        raise DataError("feature CSV columns do not match the schema")
    if any(lab is None for lab in labels):
        raise DataError("training features must all carry labels")
    users = sorted(set(labels))
    if len(users) < 2:
        raise DataError("training needs at least 2 distinct users")

    doc = load_config_file(args.config) if args.config else {}
    seed = int(doc.get("seed", 0))
    hyperparams = {k: v for k, v in doc.items() if isinstance(v, dict)}
    train = TrainingSet(matrix=X, labels=tuple(labels), user_set=tuple(users), schema=schema)
    model = fit_model(args.model, train, hyperparams, seed)
    save_model(args.out, model)
    print(f"trained {args.model} on {X.shape[0]} rows, {len(users)} users -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    summary = run_experiment(config, args.out)
    print(f"wrote report bundle with {len(summary['cells'])} cells to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = load_corpus_spec(args.spec)
    corpus = generate_corpus(spec)
    paths = write_corpus(corpus, args.out_dir)
    print(
        f"simulated {len(corpus.records)} packets, {len(corpus.sessions)} sessions, "
        f"{len(corpus.ground_truth['users'])} users -> {args.out_dir}"
    )
    for name, path in paths.items():
        log.info("%s: %s", name, path)
    return EXIT_OK


def _load_scoring_model(args):
    if args.ensemble:
        dev = load_model(args.ensemble[0])
        dom = load_model(args.ensemble[1])
        return EnsembleModel(model_dev=dev, model_dom=dom)
    return load_model(args.model)


def cmd_score(args) -> int:
    model = _load_scoring_model(args)
    records = read_records(args.records)
    for out in score_stream(
        records,
        model,
        delta=args.delta * 60.0,
        stride=args.stride,
        tolerance=args.tolerance,
    ):
        print(score_to_json(out))
    return EXIT_OK


def cmd_serve(args) -> int:
    model = _load_scoring_model(args)
    host, _, port_s = args.listen.rpartition(":")
    if not host or not port_s.isdigit():
        raise DataError(f"--listen must be host:port, got {args.listen!r}")

    def factory() -> StreamScorer:
        return StreamScorer(
            model, delta=args.delta * 60.0, stride=args.stride, tolerance=args.tolerance
        )

    server = ScoringServer((host, int(port_s)), factory, idle_timeout=args.idle_timeout)
    print(f"listening on {host}:{server.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="homeauth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"homeauth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="pcap -> PacketRecord JSONL with domain annotation")
    p.add_argument("--pcap", required=True)
    p.add_argument("--registry", required=True, help="device registry JSON")
    p.add_argument("--out", required=True, help="output records JSONL")
    p.add_argument("--dns-out", help="optionally dump the mined DNS map as JSON")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("extract", help="records + sessions -> windowed feature CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--delta", type=float, required=True, help="window length in minutes")
    p.add_argument("--repr", choices=[KIND_DEVICE, KIND_DOMAIN, KIND_BOTH], required=True)
    p.add_argument("--out", required=True, help="output feature CSV")
    p.add_argument("--stride", type=float, default=60.0, help="stride in seconds")
    p.add_argument("--registry", help="device registry JSON (device/both)")
    p.add_argument("--schema", help="reuse a persisted schema JSON instead of building one")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit a classifier on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--model", choices=["logreg", "rf", "gb"], required=True)
    p.add_argument("--config", help="TOML/JSON hyperparameter file")
    p.add_argument("--schema", help="schema JSON (default: <features>.schema.json)")
    p.add_argument("--out", required=True, help="output model JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the cross-validated experiment grid")
    p.add_argument("--config", required=True, help="experiment TOML/JSON")
    p.add_argument("--out", required=True, help="report bundle directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a synthetic labeled corpus")
    p.add_argument("--spec", required=True, help="corpus spec TOML/JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="stream-score a records file to NDJSON on stdout")
    p.add_argument("--records", required=True)
    p.add_argument("--model")
    p.add_argument("--ensemble", nargs=2, metavar=("DEV_MODEL", "DOM_MODEL"))
    p.add_argument("--delta", type=float, required=True, help="window length in minutes")
    p.add_argument("--stride", type=float, default=60.0, help="stride in seconds")
    p.add_argument("--tolerance", type=float, default=1.0, help="reorder tolerance in seconds")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("serve", help="NDJSON-over-TCP scoring service")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--model")
    p.add_argument("--ensemble", nargs=2, metavar=("DEV_MODEL", "DOM_MODEL"))
    p.add_argument("--delta", type=float, required=True, help="window length in minutes")
    p.add_argument("--stride", type=float, default=60.0)
    p.add_argument("--tolerance", type=float, default=1.0)
    p.add_argument("--idle-timeout", type=float, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("HOMEAUTH_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.func in (cmd_score, cmd_serve):
            if bool(args.model) == bool(args.ensemble):
                return parser.exit_usage("exactly one of --model or --ensemble is required")
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_USAGE
    except DataError as exc:
        print(f"homeauth: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"homeauth: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - safety net
        log.exception("internal error")
        print(f"homeauth: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
