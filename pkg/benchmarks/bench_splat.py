#!/usr/bin/env python3
"""Benchmark the splat accumulation backends (compiled vs pure Python).

Renders the same randomized scene with both kernels, checks they agree
bit for bit, and reports wall time per render plus the speedup.

    python benchmarks/bench_splat.py --contacts 64 --size 256 --repeats 5
"""

import argparse
import time

import numpy as np

from contactworld import splat


def build_scene(rng, cam, n_contacts):
    contacts = []
    for _ in range(n_contacts):
        depth = rng.uniform(0.3, 3.0)
        u = rng.uniform(10, cam.width - 10)
        v = rng.uniform(10, cam.height - 10)
        y = (cam.cx - u) * depth / cam.fx
        z = (cam.cy - v) * depth / cam.fy
        contacts.append(splat.ContactRecord(
            p=(depth, y, z), f=rng.normal(size=3) * rng.uniform(1, 8)))
    return contacts


def time_backend(backend, contacts, cam, cfg, repeats):
    best = float("inf")
    image = None
    for _ in range(repeats):
        start = time.perf_counter()
        image = splat.render_splats(contacts, cam, cfg, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best, image


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--contacts", type=int, default=64)
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.Generator(np.random.PCG64(args.seed))
    cam = splat.CameraModel(position=np.zeros(3), rotation_cw=np.eye(3),
                            fx=2.0 * args.size, fy=2.0 * args.size,
                            cx=args.size / 2.0, cy=args.size / 2.0,
                            width=args.size, height=args.size, x_min=0.05)
    cfg = splat.SplatConfig(m_max=10.0, gamma=2.0, r_min=2.0, r_max=10.0,
                            tau_depth=1.0)
    contacts = build_scene(rng, cam, args.contacts)

    backends = splat.available_backends()
    print(f"scene: {args.contacts} contacts, {args.size}x{args.size} px, "
          f"best of {args.repeats}")
    results = {}
    for backend in backends:
        elapsed, image = time_backend(backend, contacts, cam, cfg, args.repeats)
        results[backend] = (elapsed, image)
        print(f"  {backend:>8}: {elapsed * 1e3:8.2f} ms/render")

    if "compiled" in results and "python" in results:
        fast = results["compiled"][1].pixels
        slow = results["python"][1].pixels
        assert np.array_equal(fast, slow), "backends disagree"
        ratio = results["python"][0] / results["compiled"][0]
        print(f"  bit-identical outputs; compiled is {ratio:.1f}x faster")
    elif "compiled" not in backends:
        print("  compiled backend unavailable; pure-Python fallback only")


if __name__ == "__main__":
    main()
