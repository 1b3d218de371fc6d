"""Score synthetic person instances against a real-crop prototype and
remove the least plausible ones.

The prototype is the normalized sum of the mean real-instance embedding
and a text-anchor embedding.  Cosine scores feed a sharpness-controlled
softmax; a budget keeps the best half, and dropped instances are erased
from pixels and annotations together.
"""

from aeroadapt.halluc_filter import (
    FilterConfig,
    build_prototype,
    erase_instances,
    score_image,
)
from aeroadapt.toydata import PooledEmbedder, RingMeanEraser, make_toy_pair
from aeroadapt.pipeline import run_hr_stage


def main():
    synthetic, real = make_toy_pair(n_synthetic=3, n_real=3, seed=29)
    embedder = PooledEmbedder()
    cfg = FilterConfig(lam=0.2, alpha=10.0, seed=4)

    proto = build_prototype(real, embedder, cfg)
    print(f"prototype from {proto.source_count} real crops, "
          f"anchor {proto.anchor_text!r}, lambda {proto.lam}")

    image = max(synthetic.records, key=lambda r: len(r.boxes))
    scores = score_image(image, proto, embedder, cfg.context_pad)
    for instance_id, score in scores:
        print(f"  {image.image_id} instance {instance_id}: cosine {score:+.4f}")

    worst = min(scores, key=lambda pair: pair[1])[0]
    erased, record = erase_instances(image, [worst], RingMeanEraser())
    print(f"dropping instance {worst}: boxes {len(image.boxes)} -> {len(erased.boxes)}, "
          f"erase record {record['dropped']}")

    out, report = run_hr_stage(synthetic, real, cfg, embedder, RingMeanEraser())
    print("\nbatch pass:")
    for src, dst in zip(synthetic.records, out.records):
        print(f"  {src.image_id}: kept {len(dst.boxes)} of {len(src.boxes)} instances")


if __name__ == "__main__":
    main()
