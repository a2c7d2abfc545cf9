"""Figure rendering for the report paths (training curves, score
distributions, relevancy heatmaps). Figures go to files, never to a
display; delimited outputs stay the machine-readable source of truth."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "vitpad"}}


def render_loss_curves(history, path) -> None:
    """Train/dev loss per epoch with the best epoch marked."""
    epochs = range(1, len(history.train_loss) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(list(epochs), history.train_loss, label="train", marker="o", ms=3)
    ax.plot(list(epochs), history.dev_loss, label="dev", marker="s", ms=3)
    if history.initial_dev_loss is not None:
        ax.axhline(history.initial_dev_loss, color="gray", ls=":", lw=1, label="dev (initial)")
    if history.best_epoch >= 0:
        ax.axvline(history.best_epoch + 1, color="green", ls="--", lw=1, label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BCE loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_score_histogram(scores, threshold, path) -> None:
    """Bonafide vs attack score distributions with the operating threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bona = scores.bonafide_scores()
    attacks = scores.attack_scores()
    bins = [i / 40.0 for i in range(41)]
    if bona:
        ax.hist(bona, bins=bins, alpha=0.6, label="bonafide", color="tab:green")
    if attacks:
        ax.hist(attacks, bins=bins, alpha=0.6, label="attack", color="tab:red")
    if threshold is not None:
        ax.axvline(threshold, color="black", ls="--", lw=1.2, label=f"threshold {threshold:.3f}")
    ax.set_xlabel("score (higher = bonafide)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_relevancy(relevancy, path) -> None:
    """Relevancy grid as a figure (the PGM/CSV exports stay authoritative)."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    im = ax.imshow(relevancy.grid, cmap="viridis", interpolation="nearest")
    ax.set_title(f"{relevancy.method}: {relevancy.sample_id}", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
