"""Figure rendering for study and run outputs (file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import matplotlib.tri as mtri


def plot_convergence(report, path) -> None:
    """Log-log error plot of a convergence study, one line per norm."""
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    inv_dx = [1.0 / r.dx for r in report.rows]
    for norm, marker, label in (("linf", "x", r"$L^\infty$"),
                                ("l2", "o", r"$L^2$"),
                                ("h1", "s", r"$H^1$")):
        ax.loglog(inv_dx, [getattr(r.errors, norm) for r in report.rows],
                  marker=marker, color="black", fillstyle="none", label=label)
    ax.set_xlabel(r"inverse mesh size $1/\Delta x$")
    ax.set_ylabel("error")
    ax.grid(True, which="both", alpha=0.35)
    ax.legend()
    ax.set_title(f"approximation error: {report.problem}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_solution(mesh, values, path, title: str = "") -> None:
    """Pseudo-colour plot of a nodal P1 field on the mesh."""
    tri = mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1],
                             mesh.elements)
    fig, ax = plt.subplots(figsize=(5.6, 4.4))
    img = ax.tripcolor(tri, values, shading="gouraud", cmap="viridis")
    ax.triplot(tri, color="white", linewidth=0.15, alpha=0.5)
    fig.colorbar(img, ax=ax)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
