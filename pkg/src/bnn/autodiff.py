"""Minimal reverse-mode tape with the straight-through sign estimator.

The tape records layer-level nodes in execution order; backward() walks
them in reverse, accumulating gradients by summation in recording order,
so results are deterministic.  The sign nonlinearity gets the
straight-through surrogate: the upstream gradient passes through where
the *input* magnitude is within t_clip and is cancelled elsewhere (the
threshold clips on input magnitude, not on gradient magnitude).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class STEConfig:
    """Straight-through estimator settings.

    t_clip is the input-magnitude threshold: gradients pass where
    |r_i| <= t_clip (boundary inclusive).
    """

    t_clip: float = 0.5

    def __post_init__(self):
        if not self.t_clip > 0:
            raise ValueError(f"t_clip must be positive, got {self.t_clip}")


class Slot:
    """A value on the tape plus its gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=""):
        self.value = np.asarray(value)
        self.grad = None
        self.name = name

    def add_grad(self, g):
        if g.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape "
                f"{self.value.shape} for slot {self.name!r}"
            )
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


@dataclass
class _Node:
    output: Slot
    inputs: tuple
    backward_fn: object  # callable(out_grad) -> sequence of grads (or None)


@dataclass
class Tape:
    """Ordered record of operations for one forward pass."""

    nodes: list = field(default_factory=list)

    def record(self, output: Slot, inputs, backward_fn) -> Slot:
        """Append a node; backward_fn maps the output gradient to one
        gradient array (or None) per input slot."""
        self.nodes.append(_Node(output, tuple(inputs), backward_fn))
        return output

    def backward(self, loss: Slot) -> dict:
        """Accumulate gradients of loss into every reachable slot.

        Returns a dict mapping slot id to (slot, gradient).
        """
        if loss.value.size != 1:
            raise ValueError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        for node in self.nodes:
            node.output.grad = None
            for s in node.inputs:
                s.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g_out = node.output.grad
            if g_out is None:
                continue  # not reachable from the loss
            grads = node.backward_fn(g_out)
            if len(grads) != len(node.inputs):
                raise RuntimeError(
                    f"backward_fn returned {len(grads)} gradients for "
                    f"{len(node.inputs)} inputs"
                )
            for slot, g in zip(node.inputs, grads):
                if g is not None:
                    slot.add_grad(np.asarray(g))
        table = {}
        for node in self.nodes:
            for s in node.inputs + (node.output,):
                if s.grad is not None:
                    table[id(s)] = (s, s.grad)
        return table


def sign_forward(r_i: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1; output values in {-1, +1}."""
    r_i = np.asarray(r_i)
    if np.isnan(r_i).any():
        raise NumericError("sign_forward received NaN input")
    return np.where(r_i >= 0, 1.0, -1.0).astype(np.float32)


def sign_backward(
    upstream: np.ndarray, r_i: np.ndarray, cfg: STEConfig
) -> np.ndarray:
    """STE surrogate gradient: upstream where |r_i| <= t_clip, else 0."""
    upstream = np.asarray(upstream)
    r_i = np.asarray(r_i)
    if upstream.shape != r_i.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} != input shape {r_i.shape}"
        )
    mask = np.abs(r_i) <= cfg.t_clip
    return np.where(mask, upstream, 0.0).astype(np.float32)


def sign(tape: Tape, x: Slot, cfg: STEConfig) -> Slot:
    """Tape-recorded sign activation with STE backward."""
    out = Slot(sign_forward(x.value), name=f"sign({x.name})")
    r_i = x.value

    def backward_fn(g_out, r_i=r_i, cfg=cfg):
        return (sign_backward(g_out, r_i, cfg),)

    return tape.record(out, (x,), backward_fn)


def backward(tape: Tape, loss: Slot) -> dict:
    """Module-level alias for Tape.backward."""
    return tape.backward(loss)
