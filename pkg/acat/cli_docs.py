"""
Help texts for the ACAT command line.
"""

CLI_DESCRIPTION = """
🧠 ACAT: saliency-guided attention for low-signal volume classification

Trains a baseline classifier, explains it with counterfactual saliency maps
found in an autoencoder's latent space, then trains an attention-augmented
classifier (ACAT) that reads those maps, and evaluates both.

Every stage writes its artifacts and a stage.json record under --out. Rerunning
a command skips stages whose config and inputs are unchanged.
"""

CLI_EPILOG = """
Workflow:
  gen-data → train-baseline → train-ae → gen-counterfactuals → train-acat
           → gen-saliency (evaluation methods) → evaluate [→ ablate]

Examples:
  # Whole pipeline with the built-in desk configuration
  python cli.py --out runs/desk pipeline

  # Fast end-to-end check
  python cli.py --config configs/smoke.json --out runs/smoke pipeline

  # Stage by stage, with a different master seed
  python cli.py --seed 7 --out runs/s7 gen-data
  python cli.py --seed 7 --out runs/s7 train-baseline
  python cli.py --seed 7 --out runs/s7 gen-saliency --method gradient

  # Score externally produced maps (NNNN.f32 files) against the run's dataset
  python cli.py --out runs/desk evaluate --maps path/to/maps

Exit codes:
  0  all requested stages succeeded
  1  a stage failed or an input was missing
  2  invalid command line or run config
"""

GEN_DATA_HELP = "Generate the synthetic lesion dataset archive"
TRAIN_BASELINE_HELP = "Train the baseline classifier of every run"
TRAIN_AE_HELP = "Train the autoencoder of every run"
GEN_COUNTERFACTUALS_HELP = "Counterfactual saliency maps (with search traces) of every run"
GEN_SALIENCY_HELP = "Saliency maps by any method of every run"
TRAIN_ACAT_HELP = "Train the attention-augmented classifier of every run"
EVALUATE_HELP = "Evaluate every run and aggregate the reports, or score a directory of maps"
ABLATE_HELP = "Ablation suite (plus dropout control and saliency-method suite when configured)"
PIPELINE_HELP = "Run every stage in order"
ACCEPTANCE_HELP = "Run the pipeline, then the measured acceptance battery"

METHOD_HELP = "Saliency method"
SOURCE_HELP = "Classifier to explain: the baseline, or the trained ACAT model bound to each sample's map"
MAPS_HELP = "Directory of NNNN.f32 maps to score instead of the run's own maps"
