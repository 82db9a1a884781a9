"""Self-contained oracle suites behind the ``verify`` CLI subcommand.

Each suite re-derives an expected result through an independent route
(finite differences, exhaustive search, invariant checking) and compares
the production path against it.
"""

import numpy as np

from .coreset import brute_force_k_center, cover_radius, k_center_greedy
from .data import SynthSpec, generate_synthetic
from .losses import (
    LossBatch,
    LossConfig,
    combined_loss,
    loss_grad,
    slice_positives_from_rows,
)
from .sampler import build_epoch, tuple_width


def random_loss_batch(rng, n_pairs=4, dim=5, n_patients=2):
    """A random two-view batch with plausible patient/volume/depth structure."""
    pid1 = rng.integers(0, n_patients, size=n_pairs)
    vid1 = pid1 * 10 + rng.integers(0, 2, size=n_pairs)
    idx1 = rng.integers(0, 4, size=n_pairs)
    sid1 = np.arange(n_pairs)
    z = rng.standard_normal((2 * n_pairs, dim))
    pos = slice_positives_from_rows(
        np.tile(sid1, 2), np.tile(vid1, 2), np.tile(idx1, 2)
    )
    return LossBatch(
        z=z,
        patient_ids=np.tile(pid1, 2),
        volume_ids=np.tile(vid1, 2),
        slice_positives=pos,
    )


def fd_loss_grad(batch, cfg, step=1e-5):
    """Central finite differences of the combined loss over every embedding."""
    z0 = batch.z
    grad = np.zeros_like(z0)
    for idx in np.ndindex(z0.shape):
        zp = z0.copy()
        zp[idx] += step
        zm = z0.copy()
        zm[idx] -= step
        lp = combined_loss(_with_z(batch, zp), cfg)
        lm = combined_loss(_with_z(batch, zm), cfg)
        grad[idx] = (lp - lm) / (2 * step)
    return grad


def _with_z(batch, z):
    return LossBatch(
        z=z,
        patient_ids=batch.patient_ids,
        volume_ids=batch.volume_ids,
        slice_positives=batch.slice_positives,
    )


def max_rel_err(a, b):
    """Largest per-entry |a-b| / max(|a|, |b|, 1) (relative above unit scale,
    absolute below it)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(n_batches=5, seed=2024, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_batches):
        batch = random_loss_batch(rng, n_pairs=int(rng.integers(2, 5)))
        cfg = LossConfig(
            tau=float(rng.choice([0.1, 0.5, 1.0])),
            ntxent=1.0,
            patient=0.05,
            volume=0.35,
            slice_group=0.1,
        )
        worst = max(worst, max_rel_err(loss_grad(batch, cfg), fd_loss_grad(batch, cfg)))
    return worst < tol, f"max rel err {worst:.3g} (tol {tol:g})"


def check_two_opt(n_instances=30, seed=2024):
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(5, 13))
        k = int(rng.integers(1, 5))
        emb = rng.standard_normal((n, int(rng.integers(1, 4))))
        n_init = int(rng.integers(0, 3))
        initial = list(rng.choice(n, size=n_init, replace=False))
        k = min(k, n - n_init)
        greedy = k_center_greedy(emb, initial, k, cold_start_seed=int(rng.integers(2 ** 31)))
        opt_radius, _ = brute_force_k_center(emb, initial, k)
        radius = cover_radius(emb, greedy.labeled)
        if opt_radius > 0:
            worst_ratio = max(worst_ratio, radius / opt_radius)
        elif radius > 0:
            return False, f"greedy radius {radius} > 0 while optimum is 0"
    ok = worst_ratio <= 2.0 + 1e-9
    return ok, f"worst greedy/optimal ratio {worst_ratio:.4f} (bound 2)"


def validate_plan(ds, plan, enabled_groups):
    """Raise AssertionError unless an epoch plan satisfies all invariants."""
    width = tuple_width(enabled_groups)
    anchors = []
    for batch in plan.batches:
        patients = [ds.record(t.anchor).patient_id for t in batch]
        assert len(set(patients)) == len(patients), "patients repeat within a batch"
        n_slices = sum(len(t.slice_ids()) for t in batch)
        assert n_slices == plan.batch_size_slices, "batch is not exactly M slices"
        for t in batch:
            anchors.append(t.anchor)
            a = ds.record(t.anchor)
            assert len(t.slice_ids()) == width, "tuple width mismatch"
            got_types = [g for g, _ in t.companions]
            assert got_types == [
                g for g in ("slice", "volume", "patient") if g in enabled_groups
            ], "companion order/type mismatch"
            for group_type, sid in t.companions:
                c = ds.record(sid)
                if group_type == "slice":
                    same_vol_adjacent = (
                        c.volume_id == a.volume_id
                        and abs(c.slice_index - a.slice_index) == 1
                    )
                    single = len(ds.volume_slices[a.volume_id]) == 1
                    assert same_vol_adjacent or (single and sid == a.slice_id), (
                        "bad adjacent companion"
                    )
                elif group_type == "volume":
                    assert c.volume_id == a.volume_id and sid != a.slice_id, (
                        "bad volume companion"
                    )
                else:
                    assert c.patient_id == a.patient_id and sid != a.slice_id, (
                        "bad patient companion"
                    )
    assert len(anchors) == len(set(anchors)), "an anchor repeats within the epoch"


def check_sampler(n_datasets=10, seed=2024):
    rng = np.random.default_rng(seed)
    for i in range(n_datasets):
        spec = SynthSpec(
            n_patients=int(rng.integers(3, 7)),
            volumes_per_patient=int(rng.integers(1, 3)),
            slices_per_volume=int(rng.integers(2, 6)),
            h=2,
            w=2,
            seed=int(rng.integers(2 ** 31)),
        )
        ds, _ = generate_synthetic(spec)
        for groups in (set(), {"slice"}, {"slice", "volume"}, {"slice", "volume", "patient"}):
            width = tuple_width(groups)
            plan = build_epoch(ds, groups, width * 2, seed=int(rng.integers(2 ** 31)))
            try:
                validate_plan(ds, plan, groups)
            except AssertionError as exc:
                return False, f"dataset {i}, groups {sorted(groups)}: {exc}"
    return True, f"{n_datasets} datasets x 4 group settings clean"


def run_all():
    """Run every suite; returns a list of (name, ok, detail)."""
    return [
        ("gradient-vs-finite-differences", *check_gradients()),
        ("greedy-two-opt-vs-exhaustive", *check_two_opt()),
        ("sampler-invariants", *check_sampler()),
    ]
