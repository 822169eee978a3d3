"""Mean per-frame prediction latency (crop, resize, standardise, forward, denormalise) on synthetic frames."""
import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from headpose import data, posenet
from headpose import train as T


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=250)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    ds = data.generate_dataset(None, 5, -(-args.frames // 5), seed=3)
    params = posenet.build_network(0)
    with threadpool_limits(args.threads):
        lat = [T.predict(params, f, a).latency_s for f, a in list(ds.items())[:args.frames]]
    lat = np.array(lat) * 1e3
    print(f"frames={len(lat)} mean_ms={lat.mean():.2f} median_ms={np.median(lat):.2f} p95_ms={np.percentile(lat, 95):.2f}")


if __name__ == "__main__":
    main()
