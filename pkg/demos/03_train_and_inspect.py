"""Train two small detectors (plain CE vs the decoupled harmonized loss) on a
heavily under-annotated corpus and compare what they learn.

Prints the headline detection metrics for both models and the converged
gradient-norm histograms that motivate the weighting: under missing
annotations, CE piles noisy-partition mass into the top gradient bin.

Runtime: roughly half a minute.

Run:  python3 demos/03_train_and_inspect.py
"""

from dghm.experiments import ExperimentConfig, run_single


def main():
    cfg = ExperimentConfig(seeds=(0,))
    eta = 0.7

    results = {}
    for loss in ("ce", "dghm_c"):
        record, model, log, pool = run_single(cfg, loss, eta, fold=0, seed=0,
                                              return_model=True)
        results[loss] = (record, log)
        r = record.report
        print(f"{loss:7s} froc={r.froc:.3f} recall={r.recall:.3f} "
              f"precision={r.precision:.3f} t_recall={r.t_recall:.3f} "
              f"r_recall={r.r_recall:.3f}  ({record.wall_time:.1f}s)")

    print("\nconverged gradient-norm histograms over the training pool "
          "(counts per bin):")
    for loss, (_, log) in results.items():
        print(f"\n  {loss}:")
        for part, hist in log.final_histograms_two_way.items():
            print(f"    {part.value:6s} {hist.counts.astype(int)}")

    ce_hists = results["ce"][1].final_histograms_two_way
    noisy = next(h for p, h in ce_hists.items() if p.value == "noisy")
    print(f"\nCE noisy-partition mass in the top bin (g >= 0.9): "
          f"{int(noisy.counts[-1])} anchors.")
    print("Those are real objects whose annotation was dropped: the model "
          "recognizes\nthem, the label contradicts it, and plain CE keeps "
          "hammering them toward 0.\nThe decoupled loss squashes exactly that "
          "mass and recovers more of the\nremoved objects (higher R-recall).")


if __name__ == "__main__":
    main()
