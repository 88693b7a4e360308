"""Presence guarantees, label merging, and mask assembly."""

import warnings

import numpy as np
import pytest

from recistseg.errors import ShapeError
from recistseg.nifti import LabelVolume
from recistseg.postprocess import (
    LogitVolume,
    OffsetSchedule,
    assemble_mask,
    class_presence,
    combine_labels,
    guarantee_presence,
)
from recistseg.prompts import RecistSphere


def sphere_mask(shape, sphere):
    """Brute-force in-sphere voxel mask, independent of the package."""
    out = np.zeros(shape, dtype=bool)
    for z in range(shape[0]):
        for y in range(shape[1]):
            for x in range(shape[2]):
                d2 = (
                    (z - sphere.center[0]) ** 2
                    + (y - sphere.center[1]) ** 2
                    + (x - sphere.center[2]) ** 2
                )
                out[z, y, x] = d2 <= sphere.radius_vox**2
    return out


class TestSchedule:
    def test_offsets_are_exponential(self):
        sched = OffsetSchedule(1.0, 2.0, 5)
        assert list(sched.offsets()) == [1.0, 2.0, 4.0, 8.0, 16.0]

    @pytest.mark.parametrize("kwargs", [dict(delta0=0.0), dict(growth=1.0), dict(max_iters=0)])
    def test_non_increasing_schedules_rejected(self, kwargs):
        with pytest.raises(ValueError):
            OffsetSchedule(**kwargs)


class TestLogitVolume:
    def test_nan_rejected(self):
        data = np.zeros((2, 2, 2), np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ShapeError, match="NaN"):
            LogitVolume(data, label=1)

    def test_positive_inf_rejected(self):
        data = np.zeros((2, 2, 2), np.float32)
        data[1, 1, 1] = np.inf
        with pytest.raises(ShapeError):
            LogitVolume(data, label=1)

    def test_negative_inf_allowed(self):
        data = np.full((2, 2, 2), -np.inf, np.float32)
        assert LogitVolume(data, label=1).label == 1

    def test_must_be_3d(self):
        with pytest.raises(ShapeError):
            LogitVolume(np.zeros((2, 2), np.float32), label=1)

    def test_label_must_be_positive(self):
        with pytest.raises(ShapeError):
            LogitVolume(np.zeros((2, 2, 2), np.float32), label=0)


class TestGuaranteePresence:
    def test_noop_when_any_voxel_positive(self):
        data = np.full((6, 6, 6), -4.0, np.float32)
        data[5, 5, 5] = 0.5  # positive far outside the sphere still counts
        keep = data.copy()
        lv = guarantee_presence(LogitVolume(data, 1), RecistSphere((2, 2, 2), 1.5))
        assert np.array_equal(lv.data, keep)

    def test_smallest_sufficient_offset_applied(self):
        sphere = RecistSphere((4, 4, 4), 2.0)
        data = np.full((9, 9, 9), -3.0, np.float32)
        lv = guarantee_presence(LogitVolume(data.copy(), 1), sphere)
        inside = sphere_mask(data.shape, sphere)
        # -3 + 1 and -3 + 2 stay non-positive; the k=2 offset of 4 is first to work
        assert np.all(lv.data[inside] == np.float32(1.0))
        assert np.all(lv.data[~inside] == np.float32(-3.0))
        assert lv.data.max() == np.float32(1.0)

    def test_zero_peak_needs_first_offset(self):
        sphere = RecistSphere((3, 3, 3), 1.5)
        data = np.full((7, 7, 7), -8.0, np.float32)
        data[3, 3, 3] = 0.0  # max exactly zero is not "present"
        lv = guarantee_presence(LogitVolume(data, 1), sphere)
        assert lv.data[3, 3, 3] == np.float32(1.0)

    def test_boundary_offset_must_be_strictly_positive(self):
        sphere = RecistSphere((3, 3, 3), 1.5)
        data = np.full((7, 7, 7), -20.0, np.float32)
        data[3, 3, 3] = -1.0  # -1 + 1 == 0 fails, -1 + 2 wins
        lv = guarantee_presence(LogitVolume(data, 1), sphere)
        assert lv.data[3, 3, 3] == np.float32(1.0)
        assert lv.data[3, 3, 4] == np.float32(-18.0)

    def test_exhausted_schedule_forces_center_voxel(self):
        sphere = RecistSphere((3, 3, 3), 1.5)
        data = np.full((7, 7, 7), -1e12, np.float32)
        with pytest.warns(UserWarning, match="schedule exhausted"):
            lv = guarantee_presence(LogitVolume(data, 4), sphere, OffsetSchedule(1.0, 2.0, 8))
        assert lv.data[3, 3, 3] == np.float32(1.0)

    def test_sphere_outside_volume_forces_nearest_voxel(self):
        data = np.full((5, 5, 5), -2.0, np.float32)
        with pytest.warns(UserWarning):
            lv = guarantee_presence(LogitVolume(data, 1), RecistSphere((-9.0, -9.0, -9.0), 1.5))
        assert lv.data[0, 0, 0] == np.float32(1.0)

    def test_matches_simulation_over_random_cases(self, rng):
        sched = OffsetSchedule(1.0, 2.0, 32)
        for _ in range(50):
            data = (rng.normal(size=(7, 8, 9)) * 3.0 - rng.uniform(0, 9)).astype(np.float32)
            center = tuple(rng.uniform(1.0, 5.0, size=3))
            sphere = RecistSphere(center, float(rng.uniform(1.5, 3.0)))

            expected = data.copy()
            inside = sphere_mask(data.shape, sphere)
            fallback = False
            if expected.max() <= 0.0:
                peak = expected[inside].max() if inside.any() else None
                for off in sched.offsets():
                    if peak is not None and peak + np.float32(off) > np.float32(0.0):
                        expected[inside] += np.float32(off)
                        break
                else:
                    fallback = True
                    nearest = tuple(
                        int(np.clip(round(center[a]), 0, data.shape[a] - 1)) for a in range(3)
                    )
                    expected[nearest] = 1.0

            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                lv = guarantee_presence(LogitVolume(data, 1), sphere, sched)
            assert np.array_equal(lv.data, expected)
            assert bool(caught) == fallback


class TestCombineLabels:
    def test_argmax_with_ties_to_smaller_label(self):
        a = np.full((2, 2, 2), -1.0, np.float32)
        b = np.full((2, 2, 2), -1.0, np.float32)
        a[0, 0, 0] = 2.0
        b[0, 0, 0] = 2.0  # tie: label 1 wins
        a[0, 0, 1] = 1.0
        b[0, 0, 1] = 3.0  # label 2 wins
        b[1, 1, 1] = 0.0  # zero is not positive: background
        mask = combine_labels([LogitVolume(a, 1), LogitVolume(b, 2)])
        assert mask.data[0, 0, 0] == 1
        assert mask.data[0, 0, 1] == 2
        assert mask.data[1, 1, 1] == 0
        assert mask.data.dtype == np.uint16

    def test_input_order_does_not_matter(self, rng):
        vols = [
            LogitVolume(rng.normal(size=(4, 4, 4)).astype(np.float32), label)
            for label in (3, 1, 2)
        ]
        got = combine_labels(vols)
        want = combine_labels(list(reversed(vols)))
        assert np.array_equal(got.data, want.data)

    def test_all_negative_is_all_background(self):
        vols = [LogitVolume(np.full((3, 3, 3), -0.5, np.float32), l) for l in (1, 2)]
        assert not combine_labels(vols).data.any()

    def test_matches_dense_argmax_oracle(self, rng):
        for _ in range(20):
            labels = [1, 2, 5]
            stack = rng.normal(size=(3, 5, 6, 4)).astype(np.float32)
            vols = [LogitVolume(stack[i].copy(), l) for i, l in enumerate(labels)]
            got = combine_labels(vols)
            peak = stack.max(axis=0)
            # first argmax hit is the smallest label because labels ascend
            pick = np.asarray(labels, np.uint16)[np.argmax(stack, axis=0)]
            want = np.where(peak > 0, pick, 0).astype(np.uint16)
            assert np.array_equal(got.data, want)

    def test_geometry_mismatch_rejected(self):
        a = LogitVolume(np.zeros((2, 2, 2), np.float32), 1)
        b = LogitVolume(np.zeros((2, 2, 3), np.float32), 2)
        with pytest.raises(ShapeError, match="geometry"):
            combine_labels([a, b])
        c = LogitVolume(np.zeros((2, 2, 2), np.float32), 2, spacing=(2.0, 1.0, 1.0))
        with pytest.raises(ShapeError, match="geometry"):
            combine_labels([a, c])

    def test_empty_list_rejected(self):
        with pytest.raises(ShapeError):
            combine_labels([])


class TestClassPresence:
    def test_counts_by_hand(self):
        data = np.zeros((3, 3, 3), np.uint16)
        data[0] = 7
        data[1, 1, 1] = 2
        mask = LabelVolume(data, (1, 1, 1))
        assert class_presence(mask, [2, 7, 9]) == {2: 1, 7: 9, 9: 0}

    def test_matches_per_label_sum_on_random_masks(self, rng):
        for _ in range(100):
            data = rng.integers(0, 6, size=(6, 7, 5)).astype(np.uint16)
            mask = LabelVolume(data, (1, 1, 1))
            labels = [1, 2, 3, 4, 5, 60001]
            got = class_presence(mask, labels)
            assert got == {l: int((data == l).sum()) for l in labels}

    def test_scratch_memory_stays_histogram_sized(self):
        import tracemalloc

        data = np.zeros((128, 512, 512), np.uint16)  # 64 MiB of mask
        data[5, :9, :9] = 3
        mask = LabelVolume(data, (1, 1, 1))
        tracemalloc.start()
        tracemalloc.reset_peak()
        counts = class_presence(mask, [3, 4])
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert counts == {3: 81, 4: 0}
        assert peak < mask.data.nbytes // 4, f"scratch peak {peak} bytes"


class TestAssembleMask:
    def test_matches_two_stage_pipeline_without_overlap(self, rng):
        spheres = {
            1: RecistSphere((3.0, 3.0, 3.0), 2.0),
            4: RecistSphere((3.0, 10.0, 10.0), 2.5),
        }
        raw = {l: rng.uniform(-5, -1, size=(8, 14, 14)).astype(np.float32) for l in spheres}
        streamed = assemble_mask(
            (LogitVolume(raw[l].copy(), l) for l in sorted(raw)), spheres
        )
        staged = combine_labels(
            [
                guarantee_presence(LogitVolume(raw[l].copy(), l), spheres[l])
                for l in sorted(raw)
            ]
        )
        assert np.array_equal(streamed.data, staged.data)
        counts = class_presence(streamed, [1, 4])
        assert counts[1] > 0 and counts[4] > 0

    def test_swallowed_label_reclaims_a_voxel(self):
        shape = (9, 9, 9)
        spheres = {1: RecistSphere((4, 4, 4), 2.0), 2: RecistSphere((4, 4, 4), 2.5)}
        weak = np.full(shape, -2.0, np.float32)
        strong = np.full(shape, 6.0, np.float32)  # wins everywhere
        mask = assemble_mask(
            [LogitVolume(weak, 1), LogitVolume(strong, 2)], spheres
        )
        counts = class_presence(mask, [1, 2])
        assert counts[1] == 1  # exactly the reclaimed voxel
        assert counts[2] == mask.data.size - 1
        z, y, x = np.argwhere(mask.data == 1)[0]
        assert (z - 4) ** 2 + (y - 4) ** 2 + (x - 4) ** 2 <= 2.0**2

    def test_reclaimed_voxel_is_own_best_logit(self):
        shape = (9, 9, 9)
        spheres = {1: RecistSphere((4, 4, 4), 2.0), 2: RecistSphere((4, 4, 4), 2.5)}
        weak = np.full(shape, -3.0, np.float32)
        weak[4, 4, 5] = -1.5  # label 1's best in-sphere voxel
        strong = np.full(shape, 9.0, np.float32)
        mask = assemble_mask([LogitVolume(weak, 1), LogitVolume(strong, 2)], spheres)
        assert mask.data[4, 4, 5] == 1

    def test_every_label_present_under_heavy_overlap(self, rng):
        for _ in range(50):
            shape = (12, 12, 12)
            labels = [1, 2, 3]
            spheres = {
                l: RecistSphere(tuple(rng.uniform(3.0, 8.0, size=3)), float(rng.uniform(1.5, 4.0)))
                for l in labels
            }
            vols = (
                LogitVolume((rng.normal(size=shape) * 2.0 - 2.0).astype(np.float32), l)
                for l in labels
            )
            mask = assemble_mask(vols, spheres)
            counts = class_presence(mask, labels)
            assert all(counts[l] > 0 for l in labels), counts

    def test_labels_must_ascend(self):
        spheres = {1: RecistSphere((1, 1, 1), 1.5), 2: RecistSphere((1, 1, 1), 1.5)}
        vols = [
            LogitVolume(np.ones((4, 4, 4), np.float32), 2),
            LogitVolume(np.ones((4, 4, 4), np.float32), 1),
        ]
        with pytest.raises(ShapeError, match="ascending"):
            assemble_mask(vols, spheres)

    def test_geometry_mismatch_rejected(self):
        spheres = {1: RecistSphere((1, 1, 1), 1.5), 2: RecistSphere((1, 1, 1), 1.5)}
        vols = [
            LogitVolume(np.ones((4, 4, 4), np.float32), 1),
            LogitVolume(np.ones((4, 4, 5), np.float32), 2),
        ]
        with pytest.raises(ShapeError, match="geometry"):
            assemble_mask(vols, spheres)

    def test_empty_iterable_rejected(self):
        with pytest.raises(ShapeError):
            assemble_mask(iter([]), {})

    def test_more_labels_than_free_voxels_warns(self):
        # both spheres cover only voxel (1,1,1); two labels cannot both fit
        spheres = {1: RecistSphere((1, 1, 1), 0.5), 2: RecistSphere((1, 1, 1), 0.5)}
        vols = [
            LogitVolume(np.full((3, 3, 3), -5.0, np.float32), 1),
            LogitVolume(np.full((3, 3, 3), -4.0, np.float32), 2),
        ]
        with pytest.warns(UserWarning, match="cannot all be placed"):
            mask = assemble_mask(vols, spheres)
        present = {int(l) for l in np.unique(mask.data) if l}
        assert len(present) == 1
