"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic end-to-end
criteria (9, 10) share one 6-user corpus and two cross-validated experiment
runs; everything is seeded, so results are reproducible bit for bit.
"""

import json
import math
import socket
import statistics
import time

import numpy as np
import pytest

from homeauth.evaluation import (
    ConfusionMatrix,
    ExperimentConfig,
    compute_metrics,
    roc_curves,
    run_experiment,
)
from homeauth.features import (
    FeatureSchema,
    build_domain_vocab,
    compute_stats,
    device_features,
    domain_features,
    extract,
    feature_matrix,
)
from homeauth.ingest import DeviceRegistry
from homeauth.models import (
    TrainingSet,
    fit_grad_boost,
    fit_logreg_l1,
    fit_random_forest,
    predict_proba,
    predict_proba_matrix,
    save_model,
    softmax_ce_loss_grad,
)
from homeauth.pcap import parse_pcap
from homeauth.server import ScoringServer, score_to_json
from homeauth.sessions import ObservationWindow, SessionLog, generate_windows, window_spans
from homeauth.simulate import CorpusSpec, generate_corpus, preset_profiles, write_corpus
from homeauth.stream import StreamScorer, score_stream

from conftest import random_record_dicts
from _pcapcraft import build_pcap, dns_response, ethernet, ipv4, pad_frame, udp
from test_evaluation import TABLE5, USERS6, mann_whitney_auc, trunc2

MIN = 60.0


def _ok(criterion: str):
    print(f"\n[acceptance] {criterion}: PASS")


# ---------------------------------------------------------------- C1, C2


def test_c01_window_arithmetic():
    session = SessionLog("s", "u", 0.0, 30 * MIN)
    assert len(window_spans(session, 5 * MIN, MIN)) == 26
    short = SessionLog("s2", "u", 0.0, 3 * MIN)
    assert window_spans(short, 5 * MIN, MIN) == [(0.0, 3 * MIN)]
    _ok("C1 window arithmetic (26 sliding windows; short session -> 1)")


def test_c02_feature_widths():
    devices = tuple(f"d{i:02d}" for i in range(15))
    dev_schema = FeatureSchema("device", device_order=devices)
    assert dev_schema.width == 420
    for vocab_size in (0, 10, 97):
        vocab = tuple(f"v{i}.com" for i in range(vocab_size))
        dom_schema = FeatureSchema("domain", domain_vocab=vocab)
        assert dom_schema.width == 27 * (vocab_size + 1)
    both = FeatureSchema("both", device_order=devices, domain_vocab=("a.com",))
    assert both.width == 420 + 54
    _ok("C2 feature widths (420 device columns; 27*(vocab+1) domain columns)")


# ---------------------------------------------------------------- C3


def _oracle_stats(values):
    if not values:
        return (0.0,) * 7
    return (
        float(len(values)),
        float(sum(values)),
        float(min(values)),
        float(max(values)),
        statistics.pstdev(values),
        statistics.fmean(values),
        float(statistics.median(values)),
    )


def test_c03_statistics_oracle_and_conservation():
    t0 = time.time()
    rng = np.random.default_rng(303)
    cases = [[], [5.0]]
    for _ in range(998):
        n = int(rng.integers(0, 500))
        cases.append((rng.normal(0, 1000, size=n)).tolist())
    for values in cases:
        got = compute_stats(values).as_array()
        want = np.array(_oracle_stats(values))
        assert np.allclose(got, want, atol=1e-9, rtol=1e-9)

    devices = ("echo_dot", "lg_tv", "kettle")
    domains = ("a.com", "b.com", "c.com")
    vocab = ("a.com",)
    for _ in range(1000):
        recs = random_record_dicts(rng, int(rng.integers(0, 40)), devices, domains)
        w = ObservationWindow(0.0, 300.0, records=tuple(recs))
        dev = device_features(w, devices).reshape(len(devices), 28)
        assert np.array_equal(dev[:, 21:27].sum(axis=1), dev[:, 0] + dev[:, 7])
        assert dev[:, 21:27].sum() == len(recs)
        dom = domain_features(w, vocab).reshape(len(vocab) + 1, 27)
        assert np.array_equal(dom[:, 21:27].sum(axis=1), dom[:, 0] + dom[:, 7])
        assert dom[:, 21:27].sum() == len(recs)
    _ok(f"C3 statistics oracle + conservation, 1000 cases each ({time.time()-t0:.1f}s)")


# ---------------------------------------------------------------- C4


def test_c04_probability_simplex():
    t0 = time.time()
    rng = np.random.default_rng(404)
    X = rng.normal(size=(60, 8))
    users = ("u1", "u2", "u3", "u4")
    labels = tuple(users[i] for i in rng.integers(0, 4, size=60))
    train = TrainingSet(X, labels, users)
    models = [
        fit_logreg_l1(train, lam=1e-3, epochs=80, lr=0.2, seed=1),
        fit_random_forest(train, n_trees=20, seed=1),
        fit_grad_boost(train, n_stages=20, lr=0.1, seed=1),
    ]
    probes = rng.normal(scale=50, size=(1000, 8))
    for model in models:
        probs = predict_proba_matrix(model, probes)
        assert np.all(probs >= 0)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9
    _ok(f"C4 probability simplex, 3 kinds x 1000 inputs ({time.time()-t0:.1f}s)")


# ---------------------------------------------------------------- C5


def test_c05_logreg_gradient_check():
    rng = np.random.default_rng(505)
    n, d, m = 5, 4, 3
    Xb = np.hstack([rng.normal(size=(n, d)), np.ones((n, 1))])
    y_idx = rng.integers(0, m, size=n)
    W = rng.normal(scale=0.5, size=(m, d + 1))
    _, grad = softmax_ce_loss_grad(W, Xb, y_idx)
    eps = 1e-6
    worst = 0.0
    for i in range(m):
        for j in range(d + 1):
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += eps
            Wm[i, j] -= eps
            lp, _ = softmax_ce_loss_grad(Wp, Xb, y_idx)
            lm, _ = softmax_ce_loss_grad(Wm, Xb, y_idx)
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(grad[i, j] - num) / (abs(num) + 1e-8))
    assert worst <= 1e-5
    _ok(f"C5 logistic-regression gradient vs central differences (rel err {worst:.2e})")


# ---------------------------------------------------------------- C6


def test_c06_gb_loss_monotone():
    t0 = time.time()
    rng = np.random.default_rng(606)
    X = rng.normal(size=(200, 20))
    users = ("a", "b", "c", "d")
    labels = tuple(users[i] for i in rng.integers(0, 4, size=200))
    train = TrainingSet(X, labels, users)
    model = fit_grad_boost(train, n_stages=100, lr=0.1, max_depth=3, seed=2)
    losses = model.params["train_loss"]
    assert len(losses) == 100
    violations = [b - a for a, b in zip(losses, losses[1:]) if b > a + 1e-12]
    assert not violations
    _ok(
        f"C6 boosting deviance non-increasing over 100 stages "
        f"({losses[0]:.4f} -> {losses[-1]:.4f}, {time.time()-t0:.1f}s)"
    )


# ---------------------------------------------------------------- C7


def test_c07_published_metrics_reproduction():
    cm = ConfusionMatrix(USERS6)
    cm.counts[:, :] = TABLE5
    report = compute_metrics(cm)
    pu = report.per_user
    assert trunc2(pu["1"]["recall"]) == 0.71 and trunc2(pu["1"]["precision"]) == 0.71
    assert trunc2(pu["3"]["recall"]) == 0.97 and trunc2(pu["3"]["precision"]) == 0.81
    assert trunc2(pu["4"]["recall"]) == 0.90 and trunc2(pu["4"]["precision"]) == 0.95
    assert trunc2(pu["6"]["recall"]) == 0.28 and trunc2(pu["6"]["precision"]) == 0.57
    assert trunc2(pu["8"]["recall"]) == 0.57 and trunc2(pu["8"]["precision"]) == 0.80
    assert trunc2(pu["10"]["recall"]) == 0.57 and trunc2(pu["10"]["precision"]) == 0.57
    assert report.micro_recall == pytest.approx(0.80, abs=1e-12)
    assert trunc2(report.weighted_precision) == 0.78
    _ok("C7 published confusion-matrix metrics (0.80 recall / 0.78 weighted precision)")


# ---------------------------------------------------------------- C8


def test_c08_roc_micro_auc_oracle():
    t0 = time.time()
    rng = np.random.default_rng(808)
    checked = 0
    while checked < 50:
        n = int(rng.integers(4, 31))
        m = int(rng.integers(2, 5))
        users = tuple(f"u{i}" for i in range(m))
        y = [users[i] for i in rng.integers(0, m, size=n)]
        if len(set(y)) < 2:
            continue
        scores = np.round(rng.random((n, m)), 1)  # heavy ties
        rc = roc_curves(y, scores, users)
        pooled_scores = np.concatenate([scores[:, i] for i in range(m)])
        pooled_pos = np.concatenate([[lab == u for lab in y] for u in users])
        want = mann_whitney_auc(pooled_scores.tolist(), pooled_pos.tolist())
        assert rc.micro["auc"] == pytest.approx(want, abs=1e-9)
        checked += 1
    _ok(f"C8 micro-AUC equals pair-counting estimator on 50 sets ({time.time()-t0:.1f}s)")


# ---------------------------------------------------------------- C9, C10


@pytest.fixture(scope="module")
def paper_analogue(tmp_path_factory):
    """6 users, medium separation, 10 sessions x 20-30 min, delta=25, k=7."""
    td = tmp_path_factory.mktemp("analogue")
    t0 = time.time()
    profiles = preset_profiles(6, "medium", seed=42)
    spec = CorpusSpec(
        profiles=tuple(profiles),
        sessions_per_user=10,
        duration_minutes=(20, 30),
        seed=42,
    )
    corpus = generate_corpus(spec)
    paths = write_corpus(corpus, td / "corpus")
    common = dict(
        records=paths["records"],
        sessions=paths["sessions"],
        registry=paths["registry"],
        deltas_min=[25.0],
        k=7,
        seed=7,
    )
    rf_summary = run_experiment(
        ExperimentConfig(
            representations=["device", "domain", "both"],
            models=["rf"],
            hyperparams={"rf": {"n_trees": 200}},
            **common,
        ),
        td / "rf",
    )
    gb_summary = run_experiment(
        ExperimentConfig(
            representations=["device", "domain"],
            models=["gb"],
            ensemble=["gb"],
            hyperparams={"gb": {"n_stages": 200, "lr": 0.01, "max_depth": 3}},
            **common,
        ),
        td / "gb",
    )
    elapsed = time.time() - t0
    return rf_summary, gb_summary, elapsed


def test_c09_synthetic_end_to_end(paper_analogue):
    rf_summary, gb_summary, elapsed = paper_analogue
    rf_f1 = rf_summary["cells"]["device-d25-rf"]["session"]["micro_f1"]
    gb_dev = gb_summary["cells"]["device-d25-gb"]["session"]
    gb_dom = gb_summary["cells"]["domain-d25-gb"]["session"]
    ens = gb_summary["cells"]["ensemble-d25-gb+gb"]["session"]
    assert rf_f1 >= 0.80
    assert gb_dev["micro_f1"] >= 0.80
    assert ens["micro_f1"] >= max(gb_dev["micro_f1"], gb_dom["micro_f1"])
    assert ens["coverage"] >= 0.60
    assert elapsed <= 300.0
    _ok(
        "C9 synthetic end-to-end analogue "
        f"(RF {rf_f1:.3f}, GB {gb_dev['micro_f1']:.3f}, "
        f"ensemble {ens['micro_f1']:.3f} @ coverage {ens['coverage']:.3f}, "
        f"{elapsed:.0f}s)"
    )


def test_c10_representation_ordering(paper_analogue):
    rf_summary, _, _ = paper_analogue
    dev = rf_summary["cells"]["device-d25-rf"]["session"]["micro_f1"]
    dom = rf_summary["cells"]["domain-d25-rf"]["session"]["micro_f1"]
    both = rf_summary["cells"]["both-d25-rf"]["session"]["micro_f1"]
    assert dev >= dom - 0.05
    assert abs(both - dev) <= 0.05
    _ok(f"C10 representation ordering (device {dev:.3f}, domain {dom:.3f}, both {both:.3f})")


# ---------------------------------------------------------------- C11


def test_c11_stream_batch_and_service_equivalence(small_corpus, small_rf):
    t0 = time.time()
    session = small_corpus.sessions[0]
    records = [r for r in small_corpus.records if session.start <= r.timestamp < session.end]
    delta, stride = 5 * MIN, MIN

    batch_windows = generate_windows(session, records, delta, stride)
    batch = [predict_proba(small_rf, fv) for fv in extract(batch_windows, small_rf.schema)]
    batch_json = [score_to_json(s) for s in batch]

    sentinel = records[-1]
    from dataclasses import replace

    stream_in = records + [replace(sentinel, timestamp=session.end)]
    offline = [
        score_to_json(o)
        for o in score_stream(stream_in, small_rf, delta, stride, anchor=session.start)
    ]
    assert offline == batch_json

    def factory():
        return StreamScorer(small_rf, delta, stride, anchor=session.start)

    server = ScoringServer(("127.0.0.1", 0), factory)
    server.run_background()
    try:
        with socket.create_connection(("127.0.0.1", server.port), timeout=10) as sock:
            fh = sock.makefile("rwb")
            for rec in stream_in:
                fh.write(json.dumps(rec.to_dict()).encode() + b"\n")
            fh.flush()
            sock.shutdown(socket.SHUT_WR)
            served = [l.decode().rstrip("\n") for l in fh if l.strip()]
    finally:
        server.shutdown()
        server.server_close()
    assert served == batch_json
    _ok(f"C11 stream/batch/service bit-identical, {len(batch_json)} windows ({time.time()-t0:.1f}s)")


# ---------------------------------------------------------------- C12


def test_c12_end_to_end_determinism(tmp_path):
    t0 = time.time()
    spec_doc = {
        "preset": {"n_users": 2, "separation": "medium", "seed": 6},
        "sessions_per_user": 3,
        "duration_minutes": [6, 8],
        "seed": 12,
    }
    corpora = []
    for run in ("one", "two"):
        from homeauth.simulate import load_corpus_spec

        spec_path = tmp_path / f"spec_{run}.json"
        spec_path.write_text(json.dumps(spec_doc))
        corpus = generate_corpus(load_corpus_spec(spec_path))
        paths = write_corpus(corpus, tmp_path / f"corpus_{run}")
        corpora.append((corpus, paths))
    for name in ("records.jsonl", "sessions.csv", "registry.json", "ground_truth.json"):
        a = (tmp_path / "corpus_one" / name).read_bytes()
        b = (tmp_path / "corpus_two" / name).read_bytes()
        assert a == b, f"corpus file {name} differs between runs"

    corpus, paths = corpora[0]
    windows = []
    for s in corpus.sessions:
        windows.extend(generate_windows(s, corpus.records, 3 * MIN, MIN))
    schema = FeatureSchema("device", device_order=corpus.registry.device_order)
    labels = tuple(w.label for w in windows)
    train = TrainingSet(
        feature_matrix(extract(windows, schema)), labels, tuple(sorted(set(labels))), schema
    )
    for run in ("one", "two"):
        save_model(tmp_path / f"model_{run}.json", fit_random_forest(train, n_trees=25, seed=5))
        save_model(
            tmp_path / f"gb_{run}.json", fit_grad_boost(train, n_stages=15, lr=0.1, seed=5)
        )
        save_model(
            tmp_path / f"lr_{run}.json", fit_logreg_l1(train, lam=1e-3, epochs=50, seed=5)
        )
    for kind in ("model", "gb", "lr"):
        assert (tmp_path / f"{kind}_one.json").read_bytes() == (
            tmp_path / f"{kind}_two.json"
        ).read_bytes(), f"{kind} file differs between runs"

    config = ExperimentConfig(
        records=paths["records"],
        sessions=paths["sessions"],
        registry=paths["registry"],
        representations=["device"],
        deltas_min=[3.0],
        models=["rf"],
        ensemble=["rf"],
        k=3,
        seed=3,
        hyperparams={"rf": {"n_trees": 10}},
    )
    for run in ("one", "two"):
        run_experiment(config, tmp_path / f"report_{run}")
    import os

    files = sorted(os.listdir(tmp_path / "report_one"))
    assert files == sorted(os.listdir(tmp_path / "report_two"))
    for name in files:
        a = (tmp_path / "report_one" / name).read_bytes()
        b = (tmp_path / "report_two" / name).read_bytes()
        assert a == b, f"report file {name} differs between runs"
    _ok(f"C12 corpus/model/report bytes identical across runs ({time.time()-t0:.1f}s)")


# ---------------------------------------------------------------- C13


DEV_MAC = "02:00:00:00:00:01"
GW_MAC = "0a:1b:2c:3d:4e:5f"


def test_c13_pcap_ingestion_fixtures(tmp_path):
    registry = DeviceRegistry({DEV_MAC: "echo_dot"}, ("echo_dot",))
    out_frame = pad_frame(
        ethernet(
            GW_MAC, DEV_MAC, 0x0800,
            ipv4("10.0.0.5", "93.184.216.34", 17, udp(50000, 443, b"q" * 60)),
        ),
        120,
    )
    dns_frame = ethernet(
        DEV_MAC, GW_MAC, 0x0800,
        ipv4("10.0.0.1", "10.0.0.5", 17,
             udp(53, 40000, dns_response("img.spotify.com", [("img.spotify.com", "13.33.74.1")]))),
    )
    stray_frame = ethernet(
        GW_MAC, "02:99:99:99:99:99", 0x0800,
        ipv4("10.9.9.9", "8.8.8.8", 17, udp(1111, 2222, b"zz")),
    )
    frames = [(100.0, out_frame), (101.5, dns_frame), (102.0, stray_frame)]

    for endian, name in (("<", "le"), (">", "be")):
        path = tmp_path / f"fixture_{name}.pcap"
        path.write_bytes(build_pcap(frames, endian=endian))
        records, dnsmap, stats = parse_pcap(path, registry)
        assert stats.packets == 3
        assert stats.records == 2
        assert stats.dropped_unregistered == 1
        assert stats.dns_answers == 1
        first, second = records
        assert (first.direction, first.protocol, first.length) == ("out", "udp", 120)
        assert first.remote_ip == "93.184.216.34"
        assert (first.src_port, first.dst_port) == (50000, 443)
        assert first.timestamp == 100.0
        assert second.direction == "in" and second.timestamp == 101.5
        assert dnsmap.lookup("13.33.74.1", 102.0) == "img.spotify.com"
    _ok("C13 pcap fixtures (both endiannesses, DNS answer, unregistered drop)")
