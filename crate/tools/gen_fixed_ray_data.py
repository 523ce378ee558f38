"""Generate the fixed ray-coupling and polarization-phase fixtures.

The values are a deterministic draw (numpy PCG64, seed 38753) and are
checked in under data/. Keys are the base-table cluster ids 1..24 and
ray indices 1..20.
"""
import json
import numpy as np

N_CLUSTERS = 24
N_RAYS = 20


def main():
    rng = np.random.Generator(np.random.PCG64(38753))
    coupling = []
    phases = []
    for n in range(1, N_CLUSTERS + 1):
        entry = {"cluster": n, "aod": list(range(1, N_RAYS + 1))}
        for key in ("aoa", "zod", "zoa"):
            entry[key] = [int(v) + 1 for v in rng.permutation(N_RAYS)]
        coupling.append(entry)
        ph = rng.integers(-180, 180, size=(N_RAYS, 4))
        phases.append({"cluster": n, "phases_deg": [[int(v) for v in row] for row in ph]})
    write_rows("../data/rcdl_c_coupling.json", '"n_rays": %d' % N_RAYS, coupling)
    write_rows("../data/rcdl_c_phases.json",
               '"n_rays": %d, "order": ["theta_theta", "theta_phi", "phi_theta", "phi_phi"]' % N_RAYS,
               phases)


def write_rows(path, header, rows):
    with open(path, "w") as f:
        f.write("{%s,\n \"clusters\": [\n" % header)
        f.write(",\n".join("  " + json.dumps(r) for r in rows))
        f.write("\n ]\n}\n")


if __name__ == "__main__":
    main()
