"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from seqgrasp.validation import Contact


def random_contact_set(rng, n, radius=0.03, jitter=0.3):
    """``n`` contacts on a sphere of ``radius`` with inward normals tilted by up to ``jitter``."""
    out = []
    for _ in range(n):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        nrm = -u + jitter * rng.uniform(-1, 1, 3)
        out.append(Contact(radius * u, nrm / np.linalg.norm(nrm)))
    return out


def cone_edges(contacts, mu, facets, center=np.zeros(3)):
    """Wrench of each cone edge per unit normal force, built with an arbitrary tangent basis."""
    cols = []
    for c in contacts:
        n = c.normal / np.linalg.norm(c.normal)
        # tangent basis from an SVD null space, unrelated to the library's choice
        t = np.linalg.svd(n[None])[2][1:]
        phase = 0.37
        for k in range(facets):
            a = phase + 2 * np.pi * k / facets
            f = n + mu * (np.cos(a) * t[0] + np.sin(a) * t[1])
            cols.append(np.concatenate([f, np.cross(c.point - center, f)]))
    return np.array(cols).T


def mc_min_residual(contacts, weight, mu, facets, f_max, rng, n_samples=100_000, chunk=20_000):
    """Smallest inf-norm residual of G f + w over random capped cone-force combinations.

    Edges are built at friction ``mu * cos(pi / facets)``: that polygon sits
    inside the inscribed circle of any ``facets``-gon cone of friction ``mu``,
    whatever its rotation, so every sample is also admissible for the solver
    under test. Each contact gets a normal force in [0, f_max] split over its
    edges with Dirichlet weights.
    """
    m = len(contacts)
    G = cone_edges(contacts, mu * np.cos(np.pi / facets), facets)
    best = np.inf
    for start in range(0, n_samples, chunk):
        k = min(chunk, n_samples - start)
        lam = rng.dirichlet(np.ones(facets), size=(k, m))
        fn = rng.uniform(0, f_max, size=(k, m, 1))
        # push a quarter of the samples toward the cap, where balancing forces often live
        fn[: k // 4] = f_max * rng.uniform(0.8, 1.0, size=(k // 4, m, 1))
        coef = (lam * fn).reshape(k, m * facets)
        r = np.abs(coef @ G.T + weight[None]).max(axis=1)
        best = min(best, float(r.min()))
    return best
