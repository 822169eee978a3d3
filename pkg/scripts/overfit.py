"""Overfit the 32-frame synthetic set and report train MAE, timing, and the frontal-frame prediction."""
import argparse
import dataclasses
import time

from headpose import experiments as X
from headpose import train as T


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=X.DESK_OVERFIT.epochs)
    ap.add_argument("--lr", type=float, default=X.DESK_OVERFIT.lr_initial)
    ap.add_argument("--seed", type=int, default=1, help="dataset seed")
    ap.add_argument("--log", default=None)
    args = ap.parse_args()

    ds = X.overfit_set(args.seed)
    cfg = dataclasses.replace(X.DESK_OVERFIT, epochs=args.epochs, lr_initial=args.lr)
    t0 = time.perf_counter()
    params, hist = T.train(cfg, ds, log_path=args.log)
    elapsed = time.perf_counter() - t0
    rep = T.evaluate(params, ds, cfg.range)
    frontal = ds.annotations[-1]
    pred = T.predict(params, ds.frame(frontal.frame_id), frontal, cfg.range)
    print(f"frames={len(ds)} epochs={cfg.epochs} lr={cfg.lr_initial:g} seconds={elapsed:.1f}")
    print(f"final loss {hist[-1].total:.5f}")
    print("train MAE (deg): " + " ".join(f"{n}={v:.3f}" for n, v in zip(T.ANGLE_NAMES, rep.mae_degrees)))
    print(f"frontal frame {frontal.frame_id}: predicted {tuple(round(v, 3) for v in pred.angles_degrees)}")


if __name__ == "__main__":
    main()
