import itertools
import time

import numpy as np
import pytest

from sparseopt.bsr_kernels import (
    KernelConfig,
    bsr_to_dense,
    dense_to_bsr,
    random_block_sparse,
    spmm,
)
from sparseopt.exceptions import ParameterError
from sparseopt.sched_cache import (
    HardwareProfile,
    OpKind,
    StructureKey,
    TaskBuffer,
    TaskDescriptor,
    candidate_configs,
    schedule,
    select_kernel_config,
    submit,
)

PROFILE = HardwareProfile(core_count=4, cache_bytes=256 * 1024, isa_tag="avx2")


def bsr(rows=16, cols=16, r=2, c=1, sparsity=0.5, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return dense_to_bsr(scale * random_block_sparse(rows, cols, r, c, sparsity, rng), r, c)


def task(matrix, op=OpKind.SPMM, batch=3):
    operand = np.ones(matrix.cols) if op is OpKind.SPMV else np.ones((matrix.cols, batch))
    return TaskDescriptor.for_matrix(op, matrix, operand, PROFILE)


def fake_timer(step=1.0):
    counter = itertools.count()
    return lambda: next(counter) * step


class TestStructureKey:
    def test_values_excluded(self):
        a = bsr(seed=1)
        b = bsr(seed=1, scale=3.0)
        assert StructureKey.of(a) == StructureKey.of(b)

    def test_structure_included(self):
        assert StructureKey.of(bsr(seed=1)) != StructureKey.of(bsr(seed=2))

    def test_block_shape_included(self):
        dense = np.ones((4, 4))
        assert StructureKey.of(dense_to_bsr(dense, 2, 1)) != StructureKey.of(dense_to_bsr(dense, 1, 2))

    def test_digest_collision_resolved_by_full_compare(self):
        a = StructureKey.of(bsr(seed=1))
        b = StructureKey.of(bsr(seed=2))
        forged = StructureKey(a.digest, b.rows, b.cols, b.block_rows, b.block_cols, b.canonical)
        assert forged != a
        assert hash(forged) == hash(a)

    def test_dense_key(self):
        key = StructureKey.of(np.zeros((3, 5)))
        assert key.block_shape == (3, 5)


class TestSubmit:
    def test_same_task_twice(self):
        t = task(bsr())
        buffer = submit(t, submit(t, TaskBuffer()))
        assert len(buffer) == 2
        assert len(buffer.cache) == 1

    def test_value_only_difference(self):
        buffer = TaskBuffer()
        submit(task(bsr(seed=3)), buffer)
        submit(task(bsr(seed=3, scale=-2.0)), buffer)
        assert len(buffer.cache) == 1

    def test_cache_counts_distinct_structures(self):
        rng = np.random.default_rng(0)
        structures = [bsr(seed=s) for s in range(7)]
        buffer = TaskBuffer()
        picks = rng.integers(0, 7, size=100)
        for i in picks:
            submit(task(structures[i]), buffer)
        expected = {StructureKey.of(structures[i]).canonical for i in picks}
        assert len(buffer) == 100
        assert len(buffer.cache) == len(expected)

    def test_op_kind_checked(self):
        with pytest.raises(ParameterError):
            TaskDescriptor.for_matrix(OpKind.SPMM, np.ones((2, 2)), np.ones((2, 2)), PROFILE)


class TestSchedule:
    def test_empty_buffer(self):
        plan = schedule(TaskBuffer())
        assert plan.tasks == ()
        assert "0 tasks" in plan.dump()

    def test_groups_repeated_structure(self):
        a, b = bsr(seed=1), bsr(seed=2)
        buffer = TaskBuffer()
        for m in (a, b, a):
            submit(task(m), buffer)
        keys = [t.structure_key for t in schedule(buffer).tasks]
        assert keys[0] == keys[1] == StructureKey.of(a)
        assert keys[2] == StructureKey.of(b)

    def test_distinct_structures_keep_order(self):
        # no shared block shape, dims or operator between any two tasks
        buffer = TaskBuffer()
        submitted = [
            task(bsr(8, 8, 2, 1), OpKind.SPMM),
            task(bsr(12, 6, 1, 3), OpKind.SPMV),
            TaskDescriptor.for_matrix(OpKind.DENSE_MM, np.ones((16, 4)), np.ones((4, 2)), PROFILE),
        ]
        for t in submitted:
            submit(t, buffer)
        assert list(schedule(buffer).tasks) == submitted

    def test_sequential_submissions_keep_order(self):
        a = bsr(16, 16, 2, 1, seed=1)
        far = bsr(16, 16, 4, 1, seed=2)
        near = bsr(16, 16, 2, 1, seed=3)
        buffer = TaskBuffer()
        for m in (a, far, near):
            submit(task(m), buffer)
        keys = [t.structure_key for t in schedule(buffer).tasks]
        assert keys == [StructureKey.of(a), StructureKey.of(far), StructureKey.of(near)]

    def test_chaining_stays_inside_a_batch(self):
        a = bsr(16, 16, 2, 1, seed=1)
        far = bsr(16, 16, 4, 1, seed=2)
        near = bsr(16, 16, 2, 1, seed=3)
        other = bsr(16, 16, 1, 1, seed=4)
        buffer = TaskBuffer()
        buffer.submit_batch([task(a), task(far)])
        buffer.submit_batch([task(other), task(near)])
        keys = [t.structure_key for t in schedule(buffer).tasks]
        assert keys == [StructureKey.of(a), StructureKey.of(far),
                        StructureKey.of(other), StructureKey.of(near)]

    def test_similar_groups_are_chained(self):
        a = bsr(16, 16, 2, 1, seed=1)
        far = bsr(16, 16, 4, 1, seed=2)
        near = bsr(16, 16, 2, 1, seed=3)
        buffer = TaskBuffer()
        buffer.submit_batch([task(m) for m in (a, far, near)])
        keys = [t.structure_key for t in schedule(buffer).tasks]
        assert keys == [StructureKey.of(a), StructureKey.of(near), StructureKey.of(far)]

    def test_randomized_invariants(self):
        rng = np.random.default_rng(42)
        pool = [bsr(16, 16, r, 1, seed=s) for r in (1, 2, 4) for s in range(4)]
        for _ in range(100):
            buffer = TaskBuffer()
            submitted = []
            batch_of = {}
            for batch in range(int(rng.integers(1, 5))):
                tasks = [task(pool[i], OpKind.SPMM if rng.random() < 0.5 else OpKind.SPMV)
                         for i in rng.integers(0, len(pool), size=int(rng.integers(1, 10)))]
                for t in tasks:
                    batch_of.setdefault(t.structure_key, batch)
                submitted.extend(tasks)
                buffer.submit_batch(tasks)
            plan = schedule(buffer)

            # permutation
            assert sorted(map(id, plan.tasks)) == sorted(map(id, submitted))
            # one cache entry per distinct structure
            assert len(plan.cache) == len({t.structure_key.canonical for t in submitted})
            # adjacency
            keys = [t.structure_key for t in plan.tasks]
            for key in set(keys):
                slots = [i for i, k in enumerate(keys) if k == key]
                assert slots == list(range(slots[0], slots[0] + len(slots)))
            # submission order inside each group
            for key in set(keys):
                in_plan = [id(t) for t in plan.tasks if t.structure_key == key]
                in_buffer = [id(t) for t in submitted if t.structure_key == key]
                assert in_plan == in_buffer
            # groups from earlier batches come first
            batches = [batch_of[t.structure_key] for t in plan.tasks]
            assert batches == sorted(batches)

    def test_value_independence(self):
        def plan_for(scale):
            buffer = TaskBuffer()
            for s in (1, 2, 1, 3):
                submit(task(bsr(seed=s, scale=scale)), buffer)
            return schedule(buffer)

        a, b = plan_for(1.0), plan_for(-5.0)
        assert [t.structure_key for t in a.tasks] == [t.structure_key for t in b.tasks]
        assert dict(a.cache) == dict(b.cache)

    def test_run_and_dump(self):
        m = bsr(seed=4)
        dense = np.arange(12.0).reshape(3, 4)
        buffer = TaskBuffer()
        submit(task(m), buffer)
        submit(TaskDescriptor.for_matrix(OpKind.DENSE_MM, dense, np.ones((4, 2)), PROFILE), buffer)
        plan = schedule(buffer)
        outputs = plan.run()
        np.testing.assert_allclose(outputs[0], bsr_to_dense(m) @ np.ones((16, 3)), rtol=1e-10)
        np.testing.assert_allclose(outputs[1], dense @ np.ones((4, 2)), rtol=1e-10)
        text = plan.dump()
        assert "2 tasks, 2 structures" in text
        assert StructureKey.of(m).hex in text


    def test_spmv_task_runs_with_cached_config(self, monkeypatch):
        import sparseopt.bsr_kernels as kernels

        seen = []
        real_spmm = kernels.spmm

        def recording_spmm(a, b, path=None, config=None):
            seen.append(config)
            return real_spmm(a, b, path, config)

        monkeypatch.setattr(kernels, "spmm", recording_spmm)
        m = bsr(seed=5)
        chosen = KernelConfig(tile_cols=8, grain=2)
        buffer = TaskBuffer(selector=lambda t: chosen)
        submit(task(m, OpKind.SPMV), buffer)
        (output,) = schedule(buffer).run()
        assert seen == [chosen]
        np.testing.assert_allclose(output, bsr_to_dense(m) @ np.ones(16), rtol=1e-10)


class TestSelectKernelConfig:
    def test_single_candidate(self):
        only = KernelConfig(tile_cols=8, grain=2)
        assert select_kernel_config(bsr(), PROFILE, candidates=[only]) == only

    def test_ties_go_to_first_candidate(self):
        candidates = [KernelConfig(0, 1), KernelConfig(0, 2), KernelConfig(16, 1)]
        chosen = select_kernel_config(bsr(), PROFILE, candidates=candidates, timer=fake_timer())
        assert chosen == candidates[0]

    def test_measurement_failure_falls_back(self):
        def broken():
            raise OSError("clock unavailable")

        chosen = select_kernel_config(bsr(64, 16, 2, 1), PROFILE, timer=broken)
        assert chosen == KernelConfig(tile_cols=0, grain=32 // 4)

    def test_candidates_depend_on_cores_and_cache(self):
        m = bsr(64, 16, 2, 1)
        small = candidate_configs(m, HardwareProfile(core_count=1, cache_bytes=4096))
        large = candidate_configs(m, HardwareProfile(core_count=8, cache_bytes=1 << 20))
        assert small != large
        assert len(set(small)) == len(small)

    def test_gpu_fields_do_not_change_candidates(self):
        m = bsr(64, 16, 2, 1)
        a = candidate_configs(m, HardwareProfile(4, 65536, max_mem_per_block=1, max_threads_per_block=1))
        b = candidate_configs(m, HardwareProfile(4, 65536, max_mem_per_block=99, max_threads_per_block=64))
        assert a == b

    def test_choice_holds_up_when_remeasured(self, monkeypatch):
        import sparseopt.sched_cache as sched

        candidates = [KernelConfig(0, 1), KernelConfig(0, 2), KernelConfig(16, 1),
                      KernelConfig(16, 2)]
        cost = dict(zip(candidates, (3.0, 1.0, 1.01, 2.0)))
        clock = [0.0]
        calls = itertools.count()

        def costed_spmm(a, b, path=None, config=None):
            # small deterministic jitter around each config's cost
            clock[0] += cost[config] * (1.0 + 0.001 * (next(calls) % 3))

        monkeypatch.setattr(sched, "spmm", costed_spmm)
        chosen = select_kernel_config(bsr(), PROFILE, candidates=candidates,
                                      noise_tolerance=0.02, timer=lambda: clock[0])
        assert chosen == candidates[1]

        def remeasured(config):
            samples = []
            for _ in range(5):
                start = clock[0]
                costed_spmm(None, None, None, config)
                samples.append(clock[0] - start)
            return float(np.median(samples))

        for other in candidates:
            assert remeasured(chosen) <= remeasured(other) * 1.02

    @pytest.mark.bench
    def test_measured_choice_within_noise_of_best(self):
        m = bsr(512, 512, 4, 1, sparsity=0.9)
        operand = np.random.default_rng(1).normal(size=(512, 64))
        chosen = select_kernel_config(m, PROFILE, operand=operand, trials=5)

        def median_ms(config):
            samples = []
            for _ in range(9):
                start = time.perf_counter()
                spmm(m, operand, None, config)
                samples.append(time.perf_counter() - start)
            return float(np.median(samples))

        best = min(median_ms(c) for c in candidate_configs(m, PROFILE))
        assert median_ms(chosen) <= 1.5 * best

    def test_measured_choice_is_competitive(self):
        m = bsr(256, 256, 4, 1, sparsity=0.5)
        operand = np.random.default_rng(0).normal(size=(256, 64))
        chosen = select_kernel_config(m, PROFILE, operand=operand)
        assert chosen in candidate_configs(m, PROFILE)

    def test_profile_validation(self):
        with pytest.raises(ParameterError):
            HardwareProfile(core_count=0, cache_bytes=1)

    def test_detect(self):
        profile = HardwareProfile.detect()
        assert profile.core_count >= 1 and profile.cache_bytes >= 1
        assert set(profile.describe()) >= {"core_count", "cache_bytes", "isa_tag"}
