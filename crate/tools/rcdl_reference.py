"""Independent reference for the reduced-CDL derivation.

Reads the base CDL-C table, the spread targets and the fixed coupling
fixture, and writes data/rcdl_c_reference.csv. The field patterns are
computed with explicit rotation matrices and spherical unit vectors,
not with closed-form angle expressions, so that this script stays an
independent check of the library pipeline.

Panel context (truncation ranking):
  BS  8 cols x 2 rows, slants +45/-45 deg, sector pattern, (0, 10, 0) deg
  UE  1 col  x 2 rows, slants 0/90 deg, isotropic, (180, 0, 0) deg
  direct port-to-element mapping, 0.5 wavelength spacing
"""
import json
import numpy as np

N_KEEP = 12


def load_table(path):
    header = {}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    header[k.strip()] = v.strip()
                continue
            if line.startswith("cluster"):
                continue
            rows.append([float(x) for x in line.split(",")])
    return header, np.array(rows)


def wrap(x):
    return np.mod(x + 180.0, 360.0) - 180.0


def spread(p, a_deg):
    z = np.sum(p * np.exp(1j * np.deg2rad(a_deg))) / np.sum(p)
    return np.rad2deg(np.sqrt(-2.0 * np.log(np.abs(z)))), np.rad2deg(np.angle(z))


def rot(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cg, -sg], [0, sg, cg]])
    return rz @ ry @ rx


def theta_hat(t, p):
    return np.array([np.cos(t) * np.cos(p), np.cos(t) * np.sin(p), -np.sin(t)])


def phi_hat(t, p):
    return np.array([-np.sin(p), np.cos(p), 0.0])


def sector_gain(t2, p2):
    a_v = -min(12.0 * ((np.rad2deg(t2) - 90.0) / 65.0) ** 2, 30.0)
    a_h = -min(12.0 * (np.rad2deg(p2) / 65.0) ** 2, 30.0)
    a = -min(-(a_v + a_h), 30.0)
    return 10 ** ((8.0 + a) / 10.0)


def field(theta, phi, orient_deg, slant_deg, sector):
    al, be, ga = np.deg2rad(orient_deg)
    r = rot(al, be, ga + np.deg2rad(slant_deg))
    rho = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    loc = r.T @ rho
    t2 = np.arccos(np.clip(loc[2], -1, 1))
    p2 = np.arctan2(loc[1], loc[0])
    g = sector_gain(t2, p2) if sector else 1.0
    th2 = theta_hat(t2, p2)
    return np.sqrt(g) * np.array([theta_hat(theta, phi) @ r @ th2, phi_hat(theta, phi) @ r @ th2])


def to_dir(zen_deg, az_deg):
    z = np.mod(zen_deg, 360.0)
    if z > 180.0:
        z = 360.0 - z
        az_deg = az_deg + 180.0
    return np.deg2rad(z), np.deg2rad(wrap(az_deg))


def main():
    header, t = load_table("../data/cdl_c.csv")
    with open("../data/rcdl_c_targets.json") as f:
        targets = json.load(f)
    with open("../data/rcdl_c_coupling.json") as f:
        coupling = {c["cluster"]: c for c in json.load(f)["clusters"]}
    offsets = np.array([float(v) for v in header["ray_offsets"].split(",")])
    m = len(offsets)
    ids = t[:, 0].astype(int)
    delays = t[:, 1]
    p = 10 ** (t[:, 2] / 10)
    p /= p.sum()
    kappa = 10 ** (float(header["xpr_db"]) / 10)

    names = ["aod", "aoa", "zod", "zoa"]
    spread_keys = ["c_asd_deg", "c_asa_deg", "c_zsd_deg", "c_zsa_deg"]
    target_keys = ["asd_deg", "asa_deg", "zsd_deg", "zsa_deg"]
    means = {}
    cs = {}
    ray_w = np.repeat(p / m, m)
    for k, name in enumerate(names):
        mean = t[:, 3 + k]
        c = float(header[spread_keys[k]])
        rays = (mean[:, None] + c * offsets[None, :]).ravel()
        as_model, mu = spread(ray_w, rays)
        ratio = targets[target_keys[k]] / as_model
        means[name] = wrap(ratio * wrap(mean - mu) + mu)
        cs[name] = ratio * c

    # ray directions with fixed coupling
    bs = dict(orient=(0.0, 10.0, 0.0), slants=(45.0, -45.0), n=16, sector=True)
    ue = dict(orient=(180.0, 0.0, 0.0), slants=(0.0, 90.0), n=2, sector=False)
    probe = np.zeros(len(ids))
    for i, cid in enumerate(ids):
        cp = coupling[cid]
        total = 0.0
        for r in range(m):
            ang = {nm: means[nm][i] + cs[nm] * offsets[cp[nm][r] - 1] for nm in names}
            dep = to_dir(ang["zod"], ang["aod"])
            arr = to_dir(ang["zoa"], ang["aoa"])
            for s in bs["slants"]:
                ft = field(*dep, bs["orient"], s, bs["sector"])
                for u in ue["slants"]:
                    fr = field(*arr, ue["orient"], u, ue["sector"])
                    e = (abs(fr[0] * ft[0]) ** 2 + abs(fr[1] * ft[1]) ** 2
                         + (abs(fr[0] * ft[1]) ** 2 + abs(fr[1] * ft[0]) ** 2) / kappa)
                    total += e * bs["n"] * ue["n"]
        probe[i] = p[i] / m * total
    order = sorted(range(len(ids)), key=lambda i: (-probe[i], i))
    keep = sorted(order[:N_KEEP])
    pk = p[keep] / p[keep].sum()
    dk = delays[keep]
    mean_d = np.sum(pk * dk)
    ds = np.sqrt(np.sum(pk * dk ** 2) - mean_d ** 2)
    dk = dk * (targets["ds_ns"] / ds)

    with open("../data/rcdl_c_reference.csv", "w") as f:
        f.write("# Reduced CDL-C reference produced by tools/rcdl_reference.py\n")
        for k, key in enumerate(spread_keys):
            f.write(f"# {key}={cs[names[k]]:.9f}\n")
        f.write(f"# xpr_db={header['xpr_db']}\n")
        f.write(f"# ray_offsets={header['ray_offsets']}\n")
        f.write("cluster,delay_ns,power_db,aod_deg,aoa_deg,zod_deg,zoa_deg\n")
        for j, i in enumerate(keep):
            f.write(f"{ids[i]},{dk[j]:.6f},{10*np.log10(pk[j]):.9f},"
                    + ",".join(f"{means[nm][i]:.9f}" for nm in names) + "\n")
    print("kept", [int(ids[i]) for i in keep])
    print("probe", np.round(probe / probe.max(), 4))


if __name__ == "__main__":
    main()
