"""Train a one-shot translator on the synthetic corpus and score it.

Usage: python3 demos/quickstart.py [iterations] [out_dir]

The source domain is warm-hued shapes on grey texture. The target domain is
represented by a single image: a held-out source passed through the oracle
(180-degree hue rotation plus a black outline). After training, held-out
sources are translated and compared with their oracle images.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from maos.data import synth_corpus, synth_test_set, to_uint8
from maos.metrics import Embedding, evaluate
from maos.trainer import TrainingConfig, restore_nets, train_loop, translate


def main(iterations: int = 300, out_dir: str = "demo_run") -> None:
    out = Path(out_dir)
    ds, _ = synth_corpus(64, 32, seed=0)
    cfg = TrainingConfig(iterations=iterations, seed=0)
    print(f"training {iterations} iterations (alpha={cfg.alpha}, threads={cfg.n_threads}, "
          f"part_size={cfg.part_size})")
    ckpt, rows = train_loop(ds, cfg, out_dir=out, progress_every=50)
    print(f"cycle_x {rows[0]['cycle_x']:.3f} -> {rows[-1]['cycle_x']:.3f}")

    xs, ys = synth_test_set(256, 32, seed=0)
    x = np.stack([s.pixels for s in xs])
    fx = translate(restore_nets(ckpt).F, x)
    emb = Embedding.parse("downsample_pixels(8)")
    ref = [s.pixels for s in ys]
    got, base = evaluate(list(fx), ref, paired_oracle=ref, emb=emb), evaluate(list(x), ref, paired_oracle=ref, emb=emb)
    print(f"FID  translated {got['fid']:.3f}  untranslated {base['fid']:.3f}")
    print(f"SSIM translated {got['ssim_mean']:.3f}  untranslated {base['ssim_mean']:.3f}")

    # one strip per row: inputs, translations, oracle images
    strip = np.concatenate([np.concatenate(list(a[:8]), axis=2) for a in (x, fx, np.stack(ref))], axis=1)
    Image.fromarray(to_uint8(strip).transpose(1, 2, 0)).resize((strip.shape[2] * 3, strip.shape[1] * 3),
                                                              Image.NEAREST).save(out / "grid.png")
    print(f"wrote {out / 'telemetry.csv'}, {out / 'checkpoint.maos'} and {out / 'grid.png'}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300, sys.argv[2] if len(sys.argv) > 2 else "demo_run")
