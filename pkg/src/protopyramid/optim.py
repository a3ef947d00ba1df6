"""Adaptive moment estimation with per-group learning rates."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, groups: dict, lrs: dict, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        """groups: {group name: {param name: Tensor}}, lrs: {group name: lr}."""
        if set(groups) != set(lrs):
            raise ValueError(f"optimizer groups {set(groups)} do not match lrs {set(lrs)}")
        self.groups = groups
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        for gname, params in groups.items():
            for pname, p in params.items():
                self.m[pname] = np.zeros_like(p.data)
                self.v[pname] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params.values():
                p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for gname, params in self.groups.items():
            lr = self.lrs[gname]
            if lr == 0.0:
                continue
            for pname in sorted(params):
                p = params[pname]
                if not p.requires_grad or p.grad is None:
                    continue
                g = p.grad
                self.m[pname] = self.beta1 * self.m[pname] + (1 - self.beta1) * g
                self.v[pname] = self.beta2 * self.v[pname] + (1 - self.beta2) * g * g
                mhat = self.m[pname] / bc1
                vhat = self.v[pname] / bc2
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self) -> dict:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        self.t = int(tensors["optim.t"][0])
        for name in self.m:
            self.m[name] = tensors[f"optim.m.{name}"].copy()
            self.v[name] = tensors[f"optim.v.{name}"].copy()
