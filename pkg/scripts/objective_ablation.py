"""Train the same tiny model under each objective and tabulate the final losses.

    python3 scripts/objective_ablation.py --steps 300 --out /tmp/ablation
"""

import argparse
import os

import numpy as np

from pmlm.config import OBJECTIVES, RunConfig, TrainConfig
from pmlm.model import ModelConfig
from pmlm.toy import write_copy_corpus
from pmlm.objectives import pretrain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="ablation")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    corpus = os.path.join(args.out, "copy.txt")
    write_copy_corpus(corpus, documents=400, seed=args.seed)
    print(f"{'objective':10s} {'loss':>8s} {'ae':>8s} {'par':>8s}")
    for objective in OBJECTIVES:
        run = RunConfig(
            model=ModelConfig(layers=2, hidden_size=64, attention_heads=4, ffn_inner_hidden_size=128, max_positions=64),
            train=TrainConfig(batch_size=16, training_steps=args.steps, learning_rate=2e-3, max_len=32, seed=args.seed),
            objective=objective,
        )
        history: list[dict] = []
        pretrain(run, corpus, os.path.join(args.out, objective.replace("+", "_")), on_metrics=history.append)
        tail = history[-20:]

        def avg(key):
            vals = [h[key] for h in tail if h[key] is not None]
            return f"{np.mean(vals):8.3f}" if vals else f"{'-':>8s}"

        print(f"{objective:10s} {avg('loss')} {avg('loss_ae')} {avg('loss_par')}")


if __name__ == "__main__":
    main()
