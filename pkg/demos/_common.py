import argparse
import time

from nimap.training import TrainerConfig, train_codec
from nimap.weights_io import load_codec


def parser(description):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--codec", help="saved codec weights; trained on the spot when omitted")
    ap.add_argument("--iterations", type=int, default=3000, help="trainer iterations when no codec is given")
    ap.add_argument("--out", default="demo_out")
    return ap


def get_codec(args):
    if args.codec:
        return load_codec(args.codec)
    t0 = time.perf_counter()
    print(f"training a codec for {args.iterations} iterations (pass --codec to skip) ...")
    run = train_codec(TrainerConfig(iterations=args.iterations, log_every=0))
    print(f"  held-out NLL {run.initial['nll']:.3f} -> {run.final['nll']:.3f} in {time.perf_counter() - t0:.0f} s")
    return run.codec
