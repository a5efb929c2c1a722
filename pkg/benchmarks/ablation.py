# Runs every pipeline variant on freshly synthesized tosses and reports
# the metric table, the ordering checks and wall-clock time per stage.
#
#   python benchmarks/ablation.py --seeds 42 43 44 --tosses 10 --threads 4
#
# Rows are averaged over seeds; each seed is a separate dataset.

import argparse
import logging

import pandas as pd

from tossfuse.config import CycleConfig, SynthConfig, load_config
from tossfuse.pipeline import run_ablation
from tossfuse.synth import synthesize


def benchmark(seed: int, tosses: int, config: CycleConfig, threads: int):
    dataset = synthesize(SynthConfig(n_tosses=tosses, seed=seed), threads)
    result = run_ablation(dataset, config, threads=threads)
    summary = result.summary.assign(seed=seed)
    timings = pd.DataFrame([{'seed': seed, 'stage': stage.name, 'seconds': stage.seconds}
                            for stage in result.reports['g'].stages])
    return summary, timings, result.checks


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Pipeline variant ablation on synthetic tosses.')
    parser.add_argument('--seeds', type=int, nargs='+', default=[42])
    parser.add_argument('--tosses', type=int, default=10)
    parser.add_argument('--config', help='CycleConfig JSON')
    parser.add_argument('--threads', type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level='INFO', format='[%(levelname)s] %(name)s: %(message)s')

    config = load_config(CycleConfig, args.config)
    summaries, timings = [], []
    for seed in args.seeds:
        summary, timing, checks = benchmark(seed, args.tosses, config, args.threads)
        summaries.append(summary)
        timings.append(timing)
        print(f'seed {seed}:', ', '.join(f'{name}={passed}' for name, passed in checks.items()))

    table = pd.concat(summaries).groupby(['variant', 'label']).mean(numeric_only=True).drop(columns='seed')
    print(table.round(3).to_string())
    print(pd.concat(timings).groupby('stage')['seconds'].describe()[['mean', 'min', 'max']].round(2).to_string())
