import numpy as np
import pytest

from faastrain.errors import CheckpointError, WorkerFault
from faastrain.models import LINEAR_REGRESSION, Model, ModelConfig, dataset_to_bytes
from faastrain.sync import hierarchical_sync
from faastrain.storage import KeyValueStore, StoreParams
from faastrain.trainer import (
    BatchSchedule,
    Checkpoint,
    EpochComplete,
    apply_update,
    decode_checkpoint,
    encode_checkpoint,
    epoch_permutation,
    iteration_window,
    iterations_per_epoch,
    load_partition,
    local_window_count,
    partition_positions,
    train_step,
)


# ---------------------------------------------------------------------------
# schedules and partitioning
# ---------------------------------------------------------------------------


def test_batch_schedule_lookup():
    sched = BatchSchedule(((0, 64), (3, 256)))
    assert [sched.batch_for(e) for e in range(5)] == [64, 64, 64, 256, 256]


def test_batch_schedule_validation():
    with pytest.raises(ValueError):
        BatchSchedule(((0, 64), (0, 32)))
    with pytest.raises(ValueError):
        BatchSchedule(((1, 64),))
    with pytest.raises(ValueError):
        BatchSchedule(((0, 0),))


def test_partition_sizes_even_split():
    sizes = [len(partition_positions(100, w, 4)) for w in range(4)]
    assert sizes == [25, 25, 25, 25]


def test_partition_single_worker_gets_all():
    assert len(partition_positions(100, 0, 1)) == 100


def test_partitions_disjoint_and_cover():
    n = 101
    all_positions = np.concatenate([partition_positions(n, w, 3) for w in range(3)])
    assert sorted(all_positions.tolist()) == list(range(n))


def test_local_window_counts_example():
    # global batch 10 over 4 workers -> 3,3,2,2
    counts = [local_window_count(0, 10, w, 4) for w in range(4)]
    assert counts == [3, 3, 2, 2]
    assert sum(counts) == 10


def test_local_window_counts_divisible():
    counts = [local_window_count(0, 64, w, 8) for w in range(8)]
    assert counts == [8] * 8


def test_local_window_counts_cover_every_window():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_samples = int(rng.integers(1, 60))
        batch = int(rng.integers(1, 20))
        n_workers = int(rng.integers(1, 7))
        for t in range(iterations_per_epoch(n_samples, batch)):
            lo, hi = iteration_window(n_samples, batch, t)
            assert sum(local_window_count(lo, hi, w, n_workers)
                       for w in range(n_workers)) == hi - lo


def test_window_consumption_matches_partition_sizes():
    # Summed per-iteration counts must exactly exhaust each worker's slice.
    for n_samples, batch, n_workers in [(7, 3, 2), (100, 7, 4), (11, 11, 3)]:
        for w in range(n_workers):
            consumed = 0
            for t in range(iterations_per_epoch(n_samples, batch)):
                lo, hi = iteration_window(n_samples, batch, t)
                consumed += local_window_count(lo, hi, w, n_workers)
            assert consumed == len(partition_positions(n_samples, w, n_workers))


def test_epoch_permutation_deterministic_per_epoch():
    p0 = epoch_permutation(64, 0, seed=5)
    p0b = epoch_permutation(64, 0, seed=5)
    p1 = epoch_permutation(64, 1, seed=5)
    np.testing.assert_array_equal(p0, p0b)
    assert not np.array_equal(p0, p1)
    assert sorted(p0.tolist()) == list(range(64))


def make_cursor(n_samples=20, n_features=2, worker=0, n_workers=2, epoch=0, seed=0):
    rng = np.random.default_rng(99)
    X = rng.normal(size=(n_samples, n_features))
    y = rng.normal(size=(n_samples, 1))
    chunk = dataset_to_bytes(X, y)
    return load_partition(worker, n_workers, epoch, seed, [chunk], n_samples,
                          n_features, 1, rows_per_chunk=n_samples), X, y


def test_next_minibatch_advances_cursor():
    cur, X, y = make_cursor()
    Xb, yb = cur.next_minibatch(batch=6, iteration=0)
    assert Xb.shape[0] == 3  # half of the 6-sample window
    assert cur.cursor == 3


def test_next_minibatch_epoch_complete():
    cur, _, _ = make_cursor(n_samples=10)
    for t in range(5):
        cur.next_minibatch(batch=2, iteration=t)
    with pytest.raises(EpochComplete):
        cur.next_minibatch(batch=2, iteration=5)
    assert cur.cursor == cur.size


def test_partition_rows_follow_permutation():
    cur, X, y = make_cursor(n_samples=12, worker=1, n_workers=3, epoch=2, seed=7)
    perm = epoch_permutation(12, 2, 7)
    mine = perm[np.arange(1, 12, 3)]
    np.testing.assert_array_equal(cur.X, X[mine])


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def test_apply_update_zero_lr_is_identity():
    model = Model.initialize(ModelConfig(LINEAR_REGRESSION, n_features=2), 0)
    before = model.params.copy()
    apply_update(model, np.ones(3), learning_rate=0.0)
    np.testing.assert_array_equal(model.params, before)


def test_apply_update_arithmetic():
    model = Model(ModelConfig(LINEAR_REGRESSION, n_features=1), np.array([1.0, 1.0]))
    apply_update(model, np.array([1.0, 2.0]), learning_rate=0.5)
    np.testing.assert_array_equal(model.params, [0.5, 0.0])


def test_apply_update_rejects_length_mismatch():
    model = Model.initialize(ModelConfig(LINEAR_REGRESSION, n_features=2), 0)
    with pytest.raises(WorkerFault):
        apply_update(model, np.ones(5), 0.1)


def sequential_sgd(model, X, y, perm, batch, lr, iterations):
    """Single-process oracle: plain SGD over the permuted global batches."""
    model = model.clone()
    n = X.shape[0]
    for t in range(iterations):
        lo, hi = iteration_window(n, batch, t)
        idx = perm[lo:hi]
        _, grad = model.loss_and_grad(X[idx], y[idx])
        apply_update(model, grad, lr)
    return model


def data_parallel_sgd(model, X, y, batch, lr, n_workers, epochs=1, seed=0):
    """Gang of workers synchronizing through a store each iteration."""
    n = X.shape[0]
    chunk = dataset_to_bytes(X, y)
    gang = [model.clone() for _ in range(n_workers)]
    for epoch in range(epochs):
        cursors = [load_partition(w, n_workers, epoch, seed, [chunk], n,
                                  X.shape[1], y.shape[1], rows_per_chunk=n)
                   for w in range(n_workers)]
        for t in range(iterations_per_epoch(n, batch)):
            lo, hi = iteration_window(n, batch, t)
            window = hi - lo
            grads = []
            for w in range(n_workers):
                Xb, yb = cursors[w].next_minibatch(batch, t)
                if Xb.shape[0] == 0:
                    grads.append(np.zeros(model.param_count))
                    continue
                _, g = train_step(gang[w], Xb, yb)
                # pre-scale so the plain mean equals the window mean
                grads.append(g * (n_workers * Xb.shape[0] / window))
            store = KeyValueStore(StoreParams(1e-4, 1e9))
            mean, _ = hierarchical_sync(grads, store, epoch=epoch, iteration=t)
            for w in range(n_workers):
                apply_update(gang[w], mean, lr)
    return gang


def test_data_parallel_equivalence_divisible():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(32, 3))
    y = rng.normal(size=(32, 1))
    model = Model.initialize(ModelConfig(LINEAR_REGRESSION, n_features=3), 1)
    gang = data_parallel_sgd(model, X, y, batch=8, lr=0.05, n_workers=4, seed=11)
    perm = epoch_permutation(32, 0, 11)
    ref = sequential_sgd(model, X, y, perm, batch=8, lr=0.05, iterations=4)
    for worker_model in gang:
        np.testing.assert_allclose(worker_model.params, ref.params, atol=1e-9)


def test_data_parallel_equivalence_non_divisible():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(17, 2))
    y = rng.normal(size=(17, 1))
    model = Model.initialize(ModelConfig(LINEAR_REGRESSION, n_features=2), 2)
    gang = data_parallel_sgd(model, X, y, batch=5, lr=0.1, n_workers=3, seed=5)
    perm = epoch_permutation(17, 0, 5)
    ref = sequential_sgd(model, X, y, perm, batch=5, lr=0.1,
                         iterations=iterations_per_epoch(17, 5))
    np.testing.assert_allclose(gang[0].params, ref.params, atol=1e-9)


def test_linreg_converges_on_noiseless_data():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(64, 4))
    true = Model(ModelConfig(LINEAR_REGRESSION, n_features=4),
                 np.array([0.5, -1.0, 2.0, 0.3, -0.2]))
    y = true.predict(X)
    model = Model.initialize(ModelConfig(LINEAR_REGRESSION, n_features=4), 0)
    losses = []
    for _ in range(300):
        loss, grad = model.loss_and_grad(X, y)
        losses.append(loss)
        apply_update(model, grad, 0.2)
    assert losses[-1] < 1e-6
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# checkpoint codec
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_exact():
    rng = np.random.default_rng(0)
    ckpt = Checkpoint(epoch=3, iteration=17, data_cursor=42,
                      parameters=rng.normal(size=33), batch_size=64,
                      success_flag=True, rng_state=b"opaque-bytes")
    blob = encode_checkpoint(ckpt)
    back = decode_checkpoint(blob)
    assert (back.epoch, back.iteration, back.data_cursor, back.batch_size,
            back.success_flag, back.rng_state) == (3, 17, 42, 64, True, b"opaque-bytes")
    np.testing.assert_array_equal(back.parameters, ckpt.parameters)
    # bit-exact re-encode
    assert encode_checkpoint(back) == blob


def test_checkpoint_magic_and_truncation():
    ckpt = Checkpoint(0, 0, 0, np.zeros(4), 8, False)
    blob = encode_checkpoint(ckpt)
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"")
