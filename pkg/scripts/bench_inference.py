"""Time forward-backward on a learned-size model with the clone-sparse and dense kernels."""
import argparse
import time

import numpy as np

from cscg.environments import make_world, standard_room
from cscg.inference import forward_backward
from cscg.model import CloneStructure, GroundedSchema, random_transitions


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--clones", type=int, default=20)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    world = make_world(standard_room("rectangle", "medium"))
    rng = np.random.default_rng(0)
    walk, _ = world.random_walk(args.steps, rng)
    clones = CloneStructure.from_sizes(np.full(world.n_obs, args.clones))
    model = GroundedSchema(random_transitions(world.n_actions, clones.n_states, rng),
                           clones.emission_matrix(world.n_obs), clones)
    for sparse in (True, False):
        forward_backward(model, walk, clone_sparse=sparse)   # compile
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            forward_backward(model, walk, clone_sparse=sparse)
            times.append(time.perf_counter() - t0)
        print(f"{'clone-sparse' if sparse else 'dense':>12}: {min(times) * 1e3:8.1f} ms "
              f"({model.n_states} states, {args.steps} steps)")


if __name__ == "__main__":
    main()
