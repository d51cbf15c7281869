"""Small end-to-end tour: phantoms, degradation, a short training run, evaluation.

Runs in about a minute.  The model only trains for a few hundred steps here,
so the numbers are illustrative; the acceptance suite trains the full default.

    python3 demos/quickstart.py
"""

from resbound.phantom import PhantomSpec, generate_corpus
from resbound.protocol import EvalConfig, paired_comparison, run_recovery_matrix
from resbound.restorer import init_params
from resbound.training import LossWeights, TrainConfig, train

train_cases = generate_corpus(PhantomSpec(seed=0), 40)
held_out = generate_corpus(PhantomSpec(seed=1 << 20), 10)

# zero-initialised heads: the untrained model returns its input unchanged
identity = run_recovery_matrix(held_out, init_params(0), EvalConfig(), seed=7)
print("untrained gain:", identity.methods["bounded"].mean_target_gain)

params, log = train(TrainConfig(steps=300, validation_every=100), LossWeights(), cases=train_cases,
                    log_every=100, logger=print)
print("validation restore term:", log.validation())

report = run_recovery_matrix(held_out, params, EvalConfig(), seed=7)
for method, summary in report.methods.items():
    print(f"{method:>9}: gain {summary.mean_target_gain:+.4f}  psnr {summary.mean_psnr_db:.2f} dB  "
          f"iatrogenic {summary.iatrogenic_rate:.0%}  footprint max {summary.mean_footprint_max:.3f}")

paired = paired_comparison(report.rows_for("bounded"), report.rows_for("gaussian"))
print(f"wins vs gaussian: {paired.win_rate_target_gain:.0%}")
