import math

import numpy as np
from django.test import SimpleTestCase

from planner.exceptions import AmbiguousProjection, CurvatureSingularity, OutOfRange
from planner.geometry_frenet import (
    PROJECTION_AMBIGUOUS,
    PROJECTION_OK,
    PROJECTION_OUT_OF_RANGE,
    CartesianState,
    FrenetState,
    ReferenceLine,
    frenet_to_cartesian,
    normalize_angle,
    project_to_frenet,
    station_rates,
)

from .factories import circular_reference, straight_reference


class ReferenceLineTests(SimpleTestCase):
    def test_polyline_is_densified_below_the_sample_spacing(self) -> None:
        ref = ReferenceLine.from_polyline([(0.0, 0.0), (30.0, 5.0), (60.0, 0.0)])
        self.assertAlmostEqual(ref.s[0], 0.0)
        self.assertTrue(np.all(np.diff(ref.s) <= 1.0))
        self.assertAlmostEqual(ref.total_length, ref.s[-1])

    def test_rejects_sparse_samples(self) -> None:
        s = np.array([0.0, 2.0, 4.0])
        with self.assertRaises(ValueError):
            ReferenceLine(s, s, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    def test_rejects_heading_off_the_tangent(self) -> None:
        s = np.linspace(0.0, 5.0, 11)
        with self.assertRaises(ValueError):
            ReferenceLine(s, s, np.zeros(11), np.full(11, 0.1), np.zeros(11), np.zeros(11))

    def test_heading_is_normalized(self) -> None:
        state = CartesianState(0.0, 0.0, 3.0 * math.pi)
        self.assertAlmostEqual(state.heading, math.pi)
        self.assertEqual(normalize_angle(-math.pi), math.pi)


class ProjectToFrenetTests(SimpleTestCase):
    def test_straight_reference(self) -> None:
        fs = project_to_frenet(CartesianState(5.0, 2.0, 0.0), straight_reference(100.0))
        self.assertAlmostEqual(fs.s, 5.0, places=9)
        self.assertAlmostEqual(fs.l, 2.0, places=9)
        self.assertAlmostEqual(fs.dl, 0.0, places=9)

    def test_point_on_circle(self) -> None:
        radius = 50.0
        ref = circular_reference(radius)
        theta = 10.0 / radius
        state = CartesianState(radius * math.sin(theta), radius * (1 - math.cos(theta)), theta)
        fs = project_to_frenet(state, ref)
        self.assertAlmostEqual(fs.s, 10.0, places=5)
        self.assertAlmostEqual(fs.l, 0.0, places=5)
        self.assertAlmostEqual(fs.dl, 0.0, places=5)

    def test_matches_dense_nearest_point(self) -> None:
        rng = np.random.default_rng(7)
        ref = ReferenceLine.from_polyline([(0.0, 0.0), (20.0, 1.0), (40.0, 5.0), (60.0, 12.0)])
        dense = np.arange(0.0, ref.total_length, 0.001)
        dx, dy, _, _, _ = ref.poses(dense)
        for _ in range(5):
            s_true = rng.uniform(10.0, ref.total_length - 10.0)
            x, y, heading, _, _ = ref.pose(s_true)
            offset = rng.uniform(-3.0, 3.0)
            px, py = x - math.sin(heading) * offset, y + math.cos(heading) * offset
            fs = project_to_frenet(CartesianState(px, py, heading), ref)

            distance = np.hypot(dx - px, dy - py)
            k = int(np.argmin(distance))
            self.assertLessEqual(abs(fs.s - dense[k]), 2e-3)
            self.assertLessEqual(abs(abs(fs.l) - distance[k]), 2e-3)
            self.assertEqual(np.sign(fs.l), np.sign(offset))

    def test_point_behind_the_start_is_out_of_range(self) -> None:
        with self.assertRaises(OutOfRange):
            project_to_frenet(CartesianState(-5.0, 0.0, 0.0), straight_reference(100.0))

    def test_centre_of_a_half_circle_is_ambiguous(self) -> None:
        radius = 10.0
        ref = circular_reference(radius, arc=math.pi * radius, step=0.5)
        with self.assertRaises(AmbiguousProjection):
            project_to_frenet(CartesianState(0.0, radius, 0.0), ref)

    def test_batch_projection_flags_each_point(self) -> None:
        radius = 10.0
        ref = circular_reference(radius, arc=math.pi * radius, step=0.5)
        x = [radius * math.sin(0.5), 0.0, -3.0]
        y = [radius * (1 - math.cos(0.5)), radius, 0.0]
        s, l, status = ref.project_xy(x, y)
        self.assertEqual(status.tolist(), [PROJECTION_OK, PROJECTION_AMBIGUOUS, PROJECTION_OUT_OF_RANGE])
        self.assertAlmostEqual(float(s[0]), 0.5 * radius, places=5)
        self.assertAlmostEqual(float(l[0]), 0.0, places=5)

    def test_batch_projection_of_a_long_line(self) -> None:
        ref = straight_reference(2000.0)
        x = np.linspace(1.0, 1999.0, 5000)
        s, l, status = ref.project_xy(x, np.full(x.size, -1.5))
        self.assertTrue(np.all(status == PROJECTION_OK))
        np.testing.assert_allclose(s, x, atol=1e-9)
        np.testing.assert_allclose(l, -1.5, atol=1e-9)

    def test_station_rates_on_straight_reference(self) -> None:
        s_dot, s_ddot = station_rates(CartesianState(5.0, 1.0, 0.0, v=10.0, a=1.0), straight_reference(100.0))
        self.assertAlmostEqual(s_dot, 10.0, places=9)
        self.assertAlmostEqual(s_ddot, 1.0, places=9)


class FrenetToCartesianTests(SimpleTestCase):
    def test_straight_reference(self) -> None:
        state = frenet_to_cartesian(FrenetState(5.0, 2.0), straight_reference(100.0))
        self.assertAlmostEqual(state.x, 5.0, places=9)
        self.assertAlmostEqual(state.y, 2.0, places=9)
        self.assertAlmostEqual(state.heading, 0.0, places=9)

    def test_origin_maps_to_first_sample(self) -> None:
        ref = circular_reference()
        state = frenet_to_cartesian(FrenetState(0.0, 0.0), ref)
        self.assertAlmostEqual(state.x, ref.x[0], places=9)
        self.assertAlmostEqual(state.y, ref.y[0], places=9)
        self.assertAlmostEqual(state.heading, ref.heading[0], places=6)

    def test_inner_offset_on_circle(self) -> None:
        radius = 50.0
        ref = circular_reference(radius)
        fs = FrenetState(10.0, 1.0)
        state = frenet_to_cartesian(fs, ref)
        self.assertAlmostEqual(math.hypot(state.x, state.y - radius), radius - 1.0, places=5)
        back = project_to_frenet(state, ref)
        self.assertLessEqual(abs(back.s - fs.s), 1e-3)
        self.assertLessEqual(abs(back.l - fs.l), 1e-3)

    def test_speed_from_station_rate(self) -> None:
        state = frenet_to_cartesian(FrenetState(5.0, 0.0), straight_reference(100.0), s_dot=10.0, s_ddot=-2.0)
        self.assertAlmostEqual(state.v, 10.0, places=9)
        self.assertAlmostEqual(state.a, -2.0, places=9)

    def test_offset_beyond_the_curvature_radius(self) -> None:
        with self.assertRaises(CurvatureSingularity):
            frenet_to_cartesian(FrenetState(10.0, 51.0), circular_reference(50.0))

    def test_station_outside_the_line(self) -> None:
        with self.assertRaises(OutOfRange):
            frenet_to_cartesian(FrenetState(120.0, 0.0), straight_reference(100.0))


class RoundTripTests(SimpleTestCase):
    def test_random_states_round_trip(self) -> None:
        rng = np.random.default_rng(11)
        for ref in (straight_reference(80.0), circular_reference(50.0)):
            for _ in range(1000):
                fs = FrenetState(
                    s=rng.uniform(5.0, ref.total_length - 5.0),
                    l=rng.uniform(-3.0, 3.0),
                    dl=rng.uniform(-0.3, 0.3),
                    ddl=rng.uniform(-0.01, 0.01),
                )
                back = project_to_frenet(frenet_to_cartesian(fs, ref), ref)
                self.assertLessEqual(abs(back.s - fs.s), 1e-3)
                self.assertLessEqual(abs(back.l - fs.l), 1e-3)
                self.assertLessEqual(abs(back.dl - fs.dl), 1e-3)

    def test_centre_line_is_an_isometry(self) -> None:
        ref = circular_reference(50.0)
        for s in np.arange(1.0, 55.0, 3.0):
            a = frenet_to_cartesian(FrenetState(s, 0.0), ref)
            b = frenet_to_cartesian(FrenetState(s + 0.5, 0.0), ref)
            self.assertAlmostEqual(math.hypot(b.x - a.x, b.y - a.y) / 0.5, 1.0, delta=1e-3)

    def test_positive_offset_is_left_of_the_tangent(self) -> None:
        ref = circular_reference(50.0)
        for s in (5.0, 25.0, 45.0):
            x, y, heading, _, _ = ref.pose(s)
            point = frenet_to_cartesian(FrenetState(s, 1.5), ref)
            cross = math.cos(heading) * (point.y - y) - math.sin(heading) * (point.x - x)
            self.assertGreater(cross, 0.0)
