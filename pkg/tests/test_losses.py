"""Matching and training objective: oracles, analytic cases, fd grads."""

import itertools

import numpy as np
import pytest

from polysnap.errors import ContractError, TrainingError
from polysnap.geometry import (
    BBox,
    Contour,
    box_arc_position,
    contour_box_intersections,
    resample_arclength,
    sample_box_contour,
)
from polysnap.head import HeadConfig, SnakeHead, attentive_merge, sample_vertex_features
from polysnap.losses import MatchResult, modulation_loss, segment_match, total_loss, vertex_loss
from polysnap.tensor import Tensor, sigmoid, sum_all


def circle(cx, cy, r, n=64):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return Contour(np.stack([cx + r * np.cos(a), cy - r * np.sin(a)], axis=1))


# ------------------------------------------------------------ segment_match

def naive_interval_match(verts: np.ndarray, gt_verts: np.ndarray, box: BBox) -> np.ndarray:
    """Re-derive interval matching with plain loops over edge pairs.

    Independent of the library helpers: crossings from 2x2 solves per edge
    pair, arc positions by walking edges, membership as the most recently
    passed crossing along the box ring.
    """
    ring = np.array(
        [[box.x0, box.y0], [box.x1, box.y0], [box.x1, box.y1], [box.x0, box.y1]]
    )

    def arcs_of(pts):
        lens = np.array([np.hypot(*(pts[(i + 1) % len(pts)] - pts[i])) for i in range(len(pts))])
        return np.concatenate([[0.0], np.cumsum(lens)[:-1]]), lens

    gt_starts, gt_lens = arcs_of(gt_verts)
    gt_per = gt_lens.sum()
    box_starts, box_lens = arcs_of(ring)
    box_per = box_lens.sum()

    hits = []
    for i in range(len(gt_verts)):
        p0, p1 = gt_verts[i], gt_verts[(i + 1) % len(gt_verts)]
        for j in range(4):
            q0, q1 = ring[j], ring[(j + 1) % 4]
            r, s = p1 - p0, q1 - q0
            den = r[0] * s[1] - r[1] * s[0]
            if den == 0.0:
                continue
            t = ((q0 - p0)[0] * s[1] - (q0 - p0)[1] * s[0]) / den
            u = ((q0 - p0)[0] * r[1] - (q0 - p0)[1] * r[0]) / den
            if -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= u <= 1 + 1e-12:
                t = min(max(t, 0.0), 1.0)
                hits.append((gt_starts[i] + t * gt_lens[i], p0 + t * r))
    hits.sort(key=lambda h: h[0])
    dedup = []
    for arc, pt in hits:
        if all(np.hypot(*(pt - p2)) >= 1e-9 * max(gt_per, 1.0) for _, p2 in dedup):
            dedup.append((arc, pt))
    if len(dedup) > 1 and np.hypot(*(dedup[0][1] - dedup[-1][1])) < 1e-9 * max(gt_per, 1.0):
        dedup.pop()
    assert dedup, "fixture must intersect the box"

    def box_arc(p):
        best = (np.inf, 0.0)
        for j in range(4):
            d = ring[(j + 1) % 4] - ring[j]
            t = min(max(float((p - ring[j]) @ d) / float(d @ d), 0.0), 1.0)
            dist = np.hypot(*(p - (ring[j] + t * d)))
            if dist < best[0]:
                best = (dist, box_starts[j] + t * box_lens[j])
        return best[1] % box_per

    def gt_point(arc):
        arc = arc % gt_per
        for i in range(len(gt_verts)):
            if arc <= gt_starts[i] + gt_lens[i] + 1e-12:
                t = (arc - gt_starts[i]) / gt_lens[i]
                return gt_verts[i] + t * (gt_verts[(i + 1) % len(gt_verts)] - gt_verts[i])
        return gt_verts[0].copy()

    g_arcs = np.array([a for a, _ in dedup])
    b_arcs = np.array([box_arc(p) for _, p in dedup])
    m = len(dedup)
    seg_len = np.array([(g_arcs[(i + 1) % m] - g_arcs[i]) % gt_per for i in range(m)])
    if m == 1:
        seg_len[0] = gt_per
    targets = np.zeros_like(verts)
    v_arcs = np.array([box_arc(v) for v in verts])
    owner = np.array([int(np.argmin((a - b_arcs) % box_per)) for a in v_arcs])
    for i in range(m):
        members = np.flatnonzero(owner == i)
        if members.size == 0:
            continue
        members = members[np.argsort((v_arcs[members] - b_arcs[i]) % box_per)]
        for j, v in enumerate(members):
            targets[v] = gt_point(g_arcs[i] + j * (seg_len[i] / members.size))
    return targets


def brute_force_match(initial: Contour, gt: Contour, box: BBox) -> np.ndarray:
    """Exhaustive order-preserving assignment minimizing total squared cost.

    Enumerates every cyclic alignment: a starting vertex plus a count per
    gt segment (in segment order), vertices assigned consecutively. Target
    sampling matches segment_match (uniform, inclusive start).
    """
    hits = contour_box_intersections(gt, box)
    assert hits, "oracle needs the intersecting path"
    verts = initial.vertices
    k = len(verts)
    gt_per = gt.perimeter
    arcs = np.array([a for _, a in hits])
    m = len(hits)
    seg_len = (np.roll(arcs, -1) - arcs) % gt_per
    if m == 1:
        seg_len[0] = gt_per

    def seg_targets(i, n):
        return gt.point_at_arc(arcs[i] + np.arange(n) * (seg_len[i] / n))

    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in compositions(total - first, parts - 1):
                yield (first,) + rest

    best_cost = np.inf
    best_targets = None
    for start in range(k):
        order = (np.arange(k) + start) % k
        for counts in compositions(k, m):
            targets = np.empty((k, 2))
            pos = 0
            for i, n in enumerate(counts):
                if n == 0:
                    continue
                targets[order[pos : pos + n]] = seg_targets(i, n)
                pos += n
            cost = float(((verts - targets) ** 2).sum())
            if cost < best_cost - 1e-12:
                best_cost = cost
                best_targets = targets
    return best_targets, best_cost


class TestSegmentMatch:
    def test_gt_equals_box_matches_identically(self):
        box = BBox(2.0, 2.0, 10.0, 10.0)
        initial = sample_box_contour(box, 8)
        gt = Contour(box.corners())
        res = segment_match(initial, gt, box)
        assert np.abs(res.targets - initial.vertices).max() < 1e-9
        assert vertex_loss(Tensor(initial.vertices.T), res.targets, 8.0).item() < 1e-12

    def test_interior_gt_uses_fallback_preserving_order(self):
        box = BBox(0.0, 0.0, 20.0, 20.0)
        initial = sample_box_contour(box, 16)
        gt = circle(10.0, 10.0, 5.0)
        res = segment_match(initial, gt, box)
        assert (res.segment_id == -1).all()
        # angular order of targets follows the angular order of vertices
        def angles(pts):
            return np.arctan2(pts[:, 1] - 10.0, pts[:, 0] - 10.0)
        va = np.unwrap(angles(initial.vertices))
        ta = np.unwrap(angles(res.targets))
        assert (np.sign(np.diff(va)) == np.sign(np.diff(ta))).all()

    def test_fallback_ties_take_smallest_rotation(self):
        # gt is the box ring resampled, so every rotation has equal cost
        # on a concentric ring of equal vertex count
        box = BBox(0.0, 0.0, 8.0, 8.0)
        initial = sample_box_contour(box, 8)
        gt = circle(4.0, 4.0, 2.0, n=64)
        res = segment_match(initial, gt, box)
        gt8 = resample_arclength(gt, 8).vertices
        d2 = ((initial.vertices[:, None] - gt8[None]) ** 2).sum(axis=2)
        rows = np.arange(8)
        costs = [d2[rows, (rows + r) % 8].sum() for r in range(8)]
        rot = int(np.argmin(costs))
        assert np.allclose(res.targets, gt8[(rows + rot) % 8])

    def test_matches_exhaustive_assignment_on_aligned_crossings(self):
        # when crossings land on initial vertices the interval rule is the
        # cost-optimal order-preserving assignment
        box = BBox(2.0, 2.0, 10.0, 10.0)
        initial = sample_box_contour(box, 8)
        diamond = Contour([[6.0, -2.0], [14.0, 6.0], [6.0, 14.0], [-2.0, 6.0]])
        for gt in (diamond, Contour(box.corners())):
            res = segment_match(initial, gt, box)
            want, want_cost = brute_force_match(initial, gt, box)
            got_cost = float(((initial.vertices - res.targets) ** 2).sum())
            assert abs(got_cost - want_cost) < 1e-6
            assert np.abs(res.targets - want).max() < 1e-6

    def test_exhaustive_assignment_is_a_lower_bound(self):
        # local interval membership can exceed the global optimum when
        # crossings are misaligned with the vertex ring, but never beat it
        box = BBox(2.0, 2.0, 10.0, 10.0)
        shapes = [
            Contour([[6.0, 4.0], [14.0, 4.0], [14.0, 12.0], [6.0, 12.0]]),
            Contour([[0.0, 4.0], [14.0, 4.0], [14.0, 8.0], [0.0, 8.0]]),
            Contour([[4.0, 4.0], [16.0, 6.0], [4.0, 8.0]]),
        ]
        for gt in shapes:
            initial = sample_box_contour(box, 8)
            res = segment_match(initial, gt, box)
            _, best = brute_force_match(initial, gt, box)
            got = float(((initial.vertices - res.targets) ** 2).sum())
            assert got >= best - 1e-9

    def test_matches_independent_rederivation(self):
        rng = np.random.default_rng(3)
        box = BBox(3.0, 2.0, 12.0, 13.0)
        initial = sample_box_contour(box, 16)
        for trial in range(8):
            a = np.sort(rng.uniform(0, 2 * np.pi, size=11))
            r = rng.uniform(3.0, 9.0, size=11)
            gt = Contour(np.stack([7.5 + r * np.cos(a), 7.5 + r * np.sin(a)], axis=1))
            if not contour_box_intersections(gt, box):
                continue
            res = segment_match(initial, gt, box)
            want = naive_interval_match(initial.vertices, gt.vertices, box)
            assert np.abs(res.targets - want).max() < 1e-6, f"trial {trial}"

    def test_order_preserved_inside_segments(self):
        box = BBox(3.0, 3.0, 17.0, 15.0)
        initial = sample_box_contour(box, 32)
        # lumpy blob crossing the box several times
        a = np.linspace(0, 2 * np.pi, 48, endpoint=False)
        r = 8.0 + 2.5 * np.sin(3 * a + 1.0)
        gt = Contour(np.stack([10 + r * np.cos(a), 9 - r * np.sin(a)], axis=1))
        res = segment_match(initial, gt, box)
        hits = contour_box_intersections(gt, box)
        assert len(hits) >= 2
        box_starts = np.array([box_arc_position(box, p) for p, _ in hits])
        vert_arcs = np.array([box_arc_position(box, v) for v in initial.vertices])
        ring = gt.point_at_arc(np.linspace(0, gt.perimeter, 4096, endpoint=False))
        for i in set(res.segment_id):
            members = np.flatnonzero(res.segment_id == i)
            offs = (vert_arcs[members] - box_starts[i]) % box.perimeter
            order = members[np.argsort(offs)]
            # matched gt arcs must increase along the segment
            t_arc = [
                ((ring - res.targets[v]) ** 2).sum(axis=1).argmin() for v in order
            ]
            rel = (np.array(t_arc, dtype=float) - t_arc[0]) % 4096
            assert (np.diff(rel) >= 0).all()

    def test_degenerate_gt_rejected(self):
        box = BBox(0.0, 0.0, 10.0, 10.0)
        initial = sample_box_contour(box, 8)
        degenerate = Contour([[1.0, 1.0], [5.0, 5.0], [3.0, 3.0]])
        assert degenerate.area == 0.0
        with pytest.raises(ContractError):
            segment_match(initial, degenerate, box)


# ------------------------------------------------------------ vertex_loss

class TestVertexLoss:
    def test_zero_at_match(self):
        rng = np.random.default_rng(5)
        t = rng.uniform(0, 10, size=(16, 2))
        assert vertex_loss(Tensor(t.T), t, 5.0).item() == 0.0

    def test_single_vertex_off_by_w(self):
        k, w = 16, 7.0
        t = np.zeros((k, 2))
        p = t.copy()
        p[3, 0] = w  # off by (W, 0): smoothL1(1) = 0.5, averaged over K
        got = vertex_loss(Tensor(p.T), t, w).item()
        assert abs(got - 0.5 / k) < 1e-7

    def test_joint_scaling_invariance(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0, 4, size=(12, 2))
        t = rng.uniform(0, 4, size=(12, 2))
        a = vertex_loss(Tensor(p.T), t, 5.0).item()
        b = vertex_loss(Tensor(3 * p.T), 3 * t, 15.0).item()
        assert abs(a - b) < 1e-6

    def test_joint_translation_invariance(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0, 4, size=(12, 2))
        t = rng.uniform(0, 4, size=(12, 2))
        a = vertex_loss(Tensor(p.T), t, 5.0).item()
        b = vertex_loss(Tensor(p.T + np.array([[8.0], [-3.0]], np.float32)), t + [8.0, -3.0], 5.0).item()
        assert abs(a - b) < 1e-5

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            p = rng.uniform(-2, 2, size=(2, 6)).astype(np.float32)
            t = rng.uniform(-2, 2, size=(6, 2))
            w = 3.0
            pt = Tensor(p, requires_grad=True)
            vertex_loss(pt, t, w).backward()
            eps = 1e-3
            num = np.zeros_like(p, dtype=np.float64)
            for idx in np.ndindex(p.shape):
                hi = p.astype(np.float64).copy()
                lo = hi.copy()
                hi[idx] += eps
                lo[idx] -= eps

                def f(arr):
                    d = (arr - t.T) / w
                    ax = np.abs(d)
                    sl1 = np.where(ax < 1, 0.5 * d * d, ax - 0.5)
                    return sl1.sum() / 6
                num[idx] = (f(hi) - f(lo)) / (2 * eps)
            err = np.abs(pt.grad - num).max() / max(np.abs(num).max(), 1.0)
            assert err < 1e-4


# -------------------------------------------------------- modulation_loss

class TestModulationLoss:
    def test_beta_matching_mask_near_zero(self):
        t = np.zeros((8, 2))
        p = t.copy()
        p[:4] += 5.0  # first half inaccurate
        beta = np.zeros((1, 8), np.float32)
        beta[0, :4] = 1.0
        loss = modulation_loss(Tensor(beta), p, t, w=10.0, tau=0.02).item()
        assert abs(loss) < 1e-5

    def test_beta_inverted_near_one(self):
        t = np.zeros((8, 2))
        p = t.copy()
        p[:4] += 5.0
        beta = np.zeros((1, 8), np.float32)
        beta[0, 4:] = 1.0
        loss = modulation_loss(Tensor(beta), p, t, w=10.0, tau=0.02).item()
        assert abs(loss - 1.0) < 1e-5

    def test_degenerate_all_accurate_low_beta_is_zero(self):
        t = np.zeros((8, 2))
        beta = np.full((1, 8), 1e-9, np.float32)
        loss = modulation_loss(Tensor(beta), t, t, w=10.0).item()
        assert loss == 0.0

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            raw = rng.standard_normal((1, 8)).astype(np.float32)
            t = rng.uniform(0, 4, size=(8, 2))
            p = t + rng.normal(0, 0.5, size=(8, 2))
            w = 4.0
            bt = Tensor(raw, requires_grad=True)
            modulation_loss(sigmoid(bt), p, t, w).backward()
            m = (np.linalg.norm(p - t, axis=1) / w > 0.02).astype(np.float64)
            eps = 1e-3
            num = np.zeros(8)
            for j in range(8):
                vals = []
                for sgn in (1.0, -1.0):
                    r = raw.astype(np.float64).copy()
                    r[0, j] += sgn * eps
                    b = 1 / (1 + np.exp(-r[0]))
                    vals.append(1 - 2 * (b * m).sum() / (b.sum() + m.sum() + 1e-6))
                num[j] = (vals[0] - vals[1]) / (2 * eps)
            err = np.abs(bt.grad[0] - num).max() / max(np.abs(num).max(), 1.0)
            assert err < 1e-4


# ------------------------------------------------------------- total_loss

class TestTotalLoss:
    def test_zero_in_zero_out(self):
        assert total_loss(Tensor(np.float32(0.0)), Tensor(np.float32(0.0))).item() == 0.0

    def test_alpha_weighting(self):
        got = total_loss(Tensor(np.float32(0.2)), Tensor(np.float32(0.1))).item()
        assert abs(got - 2.1) < 1e-6

    def test_nan_aborts(self):
        with pytest.raises(TrainingError):
            total_loss(Tensor(np.float32(np.nan)), Tensor(np.float32(0.0)))

    def test_grad_through_head_weights(self):
        """Central fd over sampled head weights through the full objective."""
        rng = np.random.default_rng(10)
        cfg = HeadConfig(k=8, dilations=(1, 2), r=1)
        head = SnakeHead(rng, cfg)
        feats = rng.standard_normal((66, 8)).astype(np.float32)
        targets = rng.uniform(-1, 1, size=(8, 2))
        anchor = rng.uniform(-1, 1, size=(2, 8)).astype(np.float32)
        w = 2.0

        def forward_f32():
            ft = Tensor(feats)
            off = head.deform(ft)
            v = Tensor(anchor) + off
            beta = sigmoid(head.beta(ft))
            lv = vertex_loss(v, targets, w)
            ld = modulation_loss(beta, v.data.T, targets, w)
            return total_loss(lv, ld)

        def forward_f64():
            def circ(f, wt, b, d):
                taps = wt.shape[2]
                r = taps // 2
                out = np.zeros((wt.shape[0], f.shape[1])) + b[:, None]
                for t in range(taps):
                    out += wt[:, :, t] @ np.roll(f, -(t - r) * d, axis=1)
                return out

            x = feats.astype(np.float64)
            total = None
            for blk in head.blocks:
                x = np.maximum(
                    circ(x, blk.w.data.astype(np.float64), blk.b.data.astype(np.float64), blk.dilation),
                    0.0,
                )
                total = x if total is None else total + x
            for layer in head.squeeze[:-1]:
                total = np.maximum(
                    circ(total, layer.w.data.astype(np.float64), layer.b.data.astype(np.float64), 1), 0.0
                )
            last = head.squeeze[-1]
            off = np.tanh(circ(total, last.w.data.astype(np.float64), last.b.data.astype(np.float64), 1))
            v = anchor.astype(np.float64) + off
            d = (v - targets.T) / w
            ax = np.abs(d)
            lv = np.where(ax < 1, 0.5 * d * d, ax - 0.5).sum() / 8
            bw = head.beta.w.data.astype(np.float64)
            bb = head.beta.b.data.astype(np.float64)
            beta = 1 / (1 + np.exp(-circ(feats.astype(np.float64), bw, bb, 1)))
            m = (np.linalg.norm(v.T - targets, axis=1) / w > 0.02).astype(np.float64)
            ld = 1 - 2 * (beta[0] * m).sum() / (beta.sum() + m.sum() + 1e-6)
            return ld + 10.0 * lv

        loss = forward_f32()
        loss.backward()
        params = [t for _, t in head.named_params("head")]
        picks = []
        for t in params:
            flat = t.data.reshape(-1)
            for j in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                picks.append((t, int(j)))
        eps = 1e-3
        worst = 0.0
        for t, j in picks:
            orig = float(t.data.reshape(-1)[j])
            t.data.reshape(-1)[j] = orig + eps
            hi = forward_f64()
            t.data.reshape(-1)[j] = orig - eps
            lo = forward_f64()
            t.data.reshape(-1)[j] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(t.grad.reshape(-1)[j])
            worst = max(worst, abs(ana - num) / max(abs(num), 1.0))
        assert worst < 1e-3, f"fd mismatch {worst:.2e}"


class TestAttentiveMergeGrad:
    def test_grad_matches_fd(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            old = rng.standard_normal((2, 6)).astype(np.float32)
            new = rng.standard_normal((2, 6)).astype(np.float32)
            raw = rng.standard_normal((1, 6)).astype(np.float32)
            cw = rng.standard_normal((2, 6)).astype(np.float32)
            to, tn, tb = (Tensor(a, requires_grad=True) for a in (old, new, raw))
            sum_all(attentive_merge(to, tn, sigmoid(tb)) * Tensor(cw)).backward()
            eps = 1e-3

            def f(o, n, r):
                b = 1 / (1 + np.exp(-r))
                return float(((b * n + (1 - b) * o) * cw).sum())

            for t, arr, k in ((to, old, 0), (tn, new, 1), (tb, raw, 2)):
                num = np.zeros_like(arr, dtype=np.float64)
                for idx in np.ndindex(arr.shape):
                    args_hi = [old.astype(np.float64), new.astype(np.float64), raw.astype(np.float64)]
                    args_lo = [a.copy() for a in args_hi]
                    args_hi[k][idx] += eps
                    args_lo[k][idx] -= eps
                    num[idx] = (f(*args_hi) - f(*args_lo)) / (2 * eps)
                err = np.abs(t.grad - num).max() / max(np.abs(num).max(), 1.0)
                assert err < 1e-4
