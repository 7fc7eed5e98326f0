import numpy as np
import pytest

from homeauth.features import FeatureSchema, build_domain_vocab, extract, feature_matrix
from homeauth.models import TrainingSet, fit_random_forest
from homeauth.sessions import generate_windows
from homeauth.simulate import CorpusSpec, generate_corpus, preset_profiles

SMALL_DELTA_S = 5 * 60.0


@pytest.fixture(scope="session")
def small_corpus():
    """3 medium-separation users, 4 short sessions each; shared read-only."""
    profiles = preset_profiles(3, "medium", seed=5)
    spec = CorpusSpec(
        profiles=tuple(profiles),
        sessions_per_user=4,
        duration_minutes=(8, 12),
        seed=11,
    )
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def small_windows(small_corpus):
    windows = []
    for s in small_corpus.sessions:
        windows.extend(generate_windows(s, small_corpus.records, SMALL_DELTA_S, 60.0))
    return windows


@pytest.fixture(scope="session")
def device_schema(small_corpus):
    return FeatureSchema("device", device_order=small_corpus.registry.device_order)


@pytest.fixture(scope="session")
def domain_schema(small_windows):
    return FeatureSchema("domain", domain_vocab=build_domain_vocab(small_windows))


@pytest.fixture(scope="session")
def small_training(small_windows, device_schema):
    vectors = extract(small_windows, device_schema)
    labels = tuple(w.label for w in small_windows)
    return TrainingSet(
        matrix=feature_matrix(vectors),
        labels=labels,
        user_set=tuple(sorted(set(labels))),
        schema=device_schema,
    )


@pytest.fixture(scope="session")
def small_rf(small_training):
    return fit_random_forest(small_training, n_trees=30, seed=9)


def random_record_dicts(rng: np.random.Generator, n: int, devices, domains, t0=0.0, span=300.0):
    """Plain synthetic records for property tests, unrelated to the simulator."""
    from homeauth.ingest import PacketRecord

    ts = np.sort(rng.uniform(t0, t0 + span, size=n))
    out = []
    for i in range(n):
        protocol = ("tcp", "udp", "icmp")[rng.integers(0, 3)]
        ports = (None, None) if protocol == "icmp" else (int(rng.integers(1024, 65536)), 443)
        out.append(
            PacketRecord(
                timestamp=float(ts[i]),
                device=devices[rng.integers(0, len(devices))],
                direction="out" if rng.random() < 0.5 else "in",
                protocol=protocol,
                length=int(rng.integers(0, 2000)),
                src_port=ports[0],
                dst_port=ports[1],
                remote_ip="192.0.2.1",
                domain=domains[rng.integers(0, len(domains))],
            )
        )
    return out
