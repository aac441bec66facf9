"""
Training the classifier on a small phantom cohort
=================================================

This is a shrunken version of the full benchmark so that it finishes in a
few minutes, with a coarser grid and fewer patients and epochs.
It walks through the same steps as ``aga3d synth`` + ``aga3d train``:
generate scans, split by patient, build the two-channel inputs, train with
the focal + contrastive objective, and evaluate on the held-out patients.

At this size the network is still on its initial loss plateau when the
epochs run out, so the test AUC stays near chance.  The bundled benchmark
configuration (``aga3d train``) uses a 64x64x32 grid, larger lesions and
20 epochs; it gets past the plateau after roughly ten epochs and takes about
a quarter of an hour on one core.

Run with ``python3 demos/03_phantom_training.py``.
"""

from aga3d.net import NetConfig
from aga3d.pipeline import PhantomSpec, TrainConfig, generate_phantoms, patient_split, prepare_inputs, train
from aga3d.pipeline.train import evaluate

spec = PhantomSpec(dims=(48, 48, 24), n_patients=80, scans_per_patient=(2, 3), region_radius=(4.5, 5.0),
                   lesion_radius=(2.0, 2.5), anatomy_jitter=1, lesion_delta=3.0)
cfg = TrainConfig(net=NetConfig(input_dims=spec.dims), epochs=8, lr=6e-4)

###############################################################################
# Generate the cohort.  Scans of one patient share the anatomy.
scans = generate_phantoms(spec)
print(len(scans), "scans from", spec.n_patients, "patients;",
      sum(s.label for s in scans), "positive")

###############################################################################
# Split by patient so that no patient lands in two parts.
tr, va, te = patient_split(scans, cfg.fractions, seed=cfg.seed)
print("split sizes", len(tr), len(va), len(te))
data = [prepare_inputs(part, cfg) for part in (tr, va, te)]


def show(rec):
    auc = rec["val"]["auc"]
    print(f"epoch {rec['epoch']}  loss {rec['train_loss']:.4f}  val AUC "
          f"{'n/a' if auc is None else f'{auc:.3f}'}")


result = train(cfg, data[0], data[1], progress=show)

###############################################################################
# Evaluate the best checkpoint on the held-out patients.
report, scores = evaluate(result.params, *data[2], cfg)
print(f"test AUC {report.auc:.3f}  accuracy {report.acc:.3f}  (best epoch {result.best_epoch})")
