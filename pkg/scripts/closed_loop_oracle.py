#!/usr/bin/env python3
"""Standalone closed-loop oracle: runs the flame/controller recurrences
directly, with no mdml imports, and prints the expected trajectories as
JSON. The acceptance suite compares the platform's observed behavior
against this script's output.

Loop structure being modeled, per tick (one PLIF period):
  1. apply the control command issued at the end of the previous tick
  2. s <- clamp01(s + alpha*(s_target(u) - s) + sigma*xi_k)
  3. frame_k -> stability index_k
  4. every `every` ticks: append (u, mean index since last decision) to the
     controller history and issue the next set_u

Randomness is counter-keyed: draw i of stream `name` at tick k comes from
a Philox generator keyed with blake2b("{seed}/{name}/{k}"). sigma=0 turns
off process and sensor noise but not pixel speckle, which is the signal.
"""

import argparse
import hashlib
import json
import sys

import numpy as np


def rng_for(seed, stream, k):
    digest = hashlib.blake2b(f"{seed}/{stream}/{k}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def run(seed, sigma, u0, ticks, every, step_size, cv_max, frame_size,
        alpha, beta, u_opt, bounds, open_loop):
    def target(u):
        return max(0.0, 1.0 - beta * (u - u_opt) ** 2)

    s = target(u0)
    u = u0
    pending_u = None
    history = []
    acc_sum, acc_n = 0.0, 0

    s_trace, index_trace, u_commands = [], [], []

    for k in range(ticks):
        if pending_u is not None:
            u = clamp(pending_u, 0.0, 1.0)
            pending_u = None

        noise = 0.0
        if sigma > 0:
            noise = sigma * float(rng_for(seed, "dyn", k).standard_normal())
        s = clamp(s + alpha * (target(u) - s) + noise, 0.0, 1.0)
        tick = k + 1  # emitted frames are keyed by the post-step counter

        eta = rng_for(seed, "plif", tick).standard_normal(frame_size * frame_size)
        pixels = 100.0 * (1.0 + (1.0 - s) * eta)
        mean = float(pixels.mean())
        cv = float(pixels.std()) / abs(mean)
        index = 1.0 - min(1.0, cv / cv_max)

        s_trace.append(s)
        index_trace.append(index)

        if not open_loop:
            acc_sum += index
            acc_n += 1
            if acc_n >= every:
                mean_index = acc_sum / acc_n
                history = (history + [[u, mean_index]])[-2:]
                if len(history) < 2:
                    u_next = clamp(u + step_size, *bounds)
                else:
                    (u_prev, i_prev), (u_now, i_now) = history
                    product = (i_now - i_prev) * (u_now - u_prev)
                    d = -1.0 if product < 0 else 1.0
                    u_next = clamp(u_now + d * step_size, *bounds)
                u_commands.append(u_next)
                pending_u = u_next
                acc_sum, acc_n = 0.0, 0

    return {
        "s_trace": s_trace,
        "index_trace": index_trace,
        "u_commands": u_commands,
        "final_u": u_commands[-1] if u_commands else u0,
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--u0", type=float, default=0.9)
    p.add_argument("--ticks", type=int, default=1200)
    p.add_argument("--every", type=int, default=20)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--cv-max", type=float, default=1.25)
    p.add_argument("--frame-size", type=int, default=16)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--u-opt", type=float, default=0.5)
    p.add_argument("--bounds", type=float, nargs=2, default=[0.0, 1.0])
    p.add_argument("--open-loop", action="store_true",
                   help="controller disabled; u stays at u0")
    p.add_argument("--tail-ticks", type=int, default=400,
                   help="window size for the trailing mean index summary")
    args = p.parse_args(argv)

    out = run(args.seed, args.sigma, args.u0, args.ticks, args.every,
              args.step_size, args.cv_max, args.frame_size,
              args.alpha, args.beta, args.u_opt, tuple(args.bounds),
              args.open_loop)
    tail = out["index_trace"][-args.tail_ticks:]
    out["tail_mean_index"] = sum(tail) / len(tail) if tail else None
    json.dump(out, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
