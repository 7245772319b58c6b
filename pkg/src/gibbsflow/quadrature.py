"""Closed composite Newton-Cotes rules on finite intervals.

Only the closed rules (trapezoid, Simpson) are provided: the velocity-field
Jacobians rely on the first and last node coinciding with the interval
endpoints, so that differentiating the prefix integral w.r.t. its moving
endpoint returns exactly the integrand value there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureRule",
    "IntegrandOverflowError",
    "integrate",
    "prefix_weights",
    "cumulative",
    "endpoint_derivative_check",
]


class IntegrandOverflowError(ValueError):
    """Integrand evaluated to a non-finite value at a quadrature node."""

    def __init__(self, node):
        self.node = node
        super().__init__(f"integrand overflow at node {node!r}")


@dataclass(frozen=True)
class QuadratureRule:
    """Closed composite Newton-Cotes rule with ``points`` equispaced nodes.

    ``kind`` is "trapezoid" or "simpson".  Simpson needs an odd node count;
    an even request is bumped to the next odd integer so callers can pass
    round numbers.
    """

    kind: str = "simpson"
    points: int = 51

    def __post_init__(self):
        if self.kind not in ("trapezoid", "simpson"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        pts = int(self.points)
        if pts < 2:
            raise ValueError("rule needs at least 2 nodes")
        if self.kind == "simpson":
            if pts < 3:
                pts = 3
            if pts % 2 == 0:
                pts += 1
        object.__setattr__(self, "points", pts)

    def nodes(self, a, b, points=None):
        return np.linspace(a, b, self.points if points is None else points)

    def weights(self, a, b, points=None):
        """Weights for equispaced nodes on [a, b]; they sum to b - a."""
        r = self.points if points is None else points
        h = (b - a) / (r - 1)
        w = np.empty(r)
        if self.kind == "trapezoid":
            w[:] = h
            w[0] = w[-1] = h / 2
        else:
            w[0::2] = 2 * h / 3
            w[1::2] = 4 * h / 3
            w[0] = w[-1] = h / 3
        return w

    def segment_points(self, length, spacing):
        """Node count for a segment of given length at a target spacing.

        Used when a rule is rebuilt on a sub-interval so that a particle
        coordinate becomes an endpoint while keeping roughly the configured
        resolution per unit length.
        """
        n = int(np.ceil(length / max(spacing, 1e-300))) + 1
        n = max(n, 3)
        if self.kind == "simpson" and n % 2 == 0:
            n += 1
        return n


def integrate(rule: QuadratureRule, phi, a, b):
    """Approximate the integral of ``phi`` on [a, b] by the composite rule."""
    if not (np.isfinite(a) and np.isfinite(b) and a < b):
        raise ValueError("need finite a < b")
    u = rule.nodes(a, b)
    vals = np.asarray([phi(ui) for ui in u], dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = u[~np.isfinite(vals)][0]
        raise IntegrandOverflowError(bad)
    return float(rule.weights(a, b) @ vals)


def prefix_weights(kind, r, h):
    """Per-node prefix integrals of the unit integrand, i.e. cumulative
    weight matrix applied implicitly.

    Returns a function mapping node values (..., r) to prefix integrals
    (..., r) consistent with the composite rule: the final entry equals the
    full composite-rule integral.
    """
    if kind == "trapezoid":
        def prefix(vals):
            vals = np.asarray(vals, dtype=float)
            seg = 0.5 * h * (vals[..., 1:] + vals[..., :-1])
            out = np.zeros(vals.shape)
            np.cumsum(seg, axis=-1, out=out[..., 1:])
            return out

        return prefix

    # Simpson: on each node pair [u_{2k}, u_{2k+2}] integrate the quadratic
    # interpolant; half-panel prefixes use the same parabola so the pair sum
    # recovers the composite Simpson weight (h/3)(f0 + 4 f1 + f2).
    def prefix(vals):
        vals = np.asarray(vals, dtype=float)
        f0 = vals[..., 0:-1:2]
        f1 = vals[..., 1::2]
        f2 = vals[..., 2::2]
        first = h * (5 * f0 + 8 * f1 - f2) / 12
        second = h * (-f0 + 8 * f1 + 5 * f2) / 12
        seg = np.empty(vals.shape[:-1] + (vals.shape[-1] - 1,))
        seg[..., 0::2] = first
        seg[..., 1::2] = second
        out = np.zeros(vals.shape)
        np.cumsum(seg, axis=-1, out=out[..., 1:])
        return out

    return prefix


def cumulative(rule: QuadratureRule, phi, a, b):
    """Prefix integrals F(u_k) at every node of the rule on [a, b].

    Returns ``(nodes, prefix, evaluate)`` where ``evaluate(x)`` reports the
    prefix at the node nearest to ``x`` (x is snapped onto the node grid).
    F(a) = 0 and F(b) equals :func:`integrate` exactly.
    """
    if not (np.isfinite(a) and np.isfinite(b) and a < b):
        raise ValueError("need finite a < b")
    u = rule.nodes(a, b)
    vals = np.asarray([phi(ui) for ui in u], dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = u[~np.isfinite(vals)][0]
        raise IntegrandOverflowError(bad)
    h = (b - a) / (rule.points - 1)
    pref = prefix_weights(rule.kind, rule.points, h)(vals)

    def evaluate(x):
        k = int(np.clip(np.rint((x - a) / h), 0, rule.points - 1))
        return float(pref[k])

    return u, pref, evaluate


def endpoint_derivative_check(rule: QuadratureRule, phi, a, x):
    """Derivative of the quadrature prefix w.r.t. its upper endpoint.

    By the closed property this is exactly the integrand at the endpoint; the
    analytic Jacobian formulas rely on this identity rather than on
    differentiating quadrature weights.
    """
    return phi(x)
