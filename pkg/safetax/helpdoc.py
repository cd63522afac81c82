# flake8: noqa

MAIN = """
Analyze how fine-tuning updates sit relative to a base model's weights, and
merge low-rank safety updates into base weights with or without
orthogonality constraints.
"""

MAIN_EPILOG = """
exit codes:
  0  success
  2  bad input: missing or malformed files, invalid flags or scenario
  3  shape mismatch between base and update tensors
  4  numerical failure: degenerate norms, SVD failure, training divergence

environment:
  SAFETAX_THREADS  default for --threads (otherwise the number of CPU cores)

Progress is logged to standard error; standard output carries only results.
"""

ANALYZE = """
Per-layer stable rank of each update and its overlap with the base weights
(m1..m4), averaged per module type. The update comes from either a LoRA
adapter (--adapter) or a full fine-tuned checkpoint (--tuned). 1-D tensors,
embeddings and output heads are skipped.
"""

ANALYZE_EPILOG = """
m1 = |W^T D| / (|W| |D|)    m2 = |U_t U_t^T D| / |D|
m3 = |W D^T| / (|W| |D|)    m4 = |V_t V_t^T D^T| / |D|

CSV columns: path, layer_index, module_type, d, k, stable_rank, m1, m2, m3, m4,
base_fro_norm, delta_fro_norm. Zero updates have empty metric cells.
Without --csv or --json the JSON report is printed.
"""

MERGE = """
Merge updates into the base weights.

  vanilla     W + D
  ortho_col   W + (I - U_k U_k^T) D
  ortho_both  W + lambda (I - U_k U_k^T) D (I - V_k V_k^T)

U_k, V_k are the top-k singular vectors of each base layer. If k reaches a
layer's smaller dimension it is clamped to one less, and the manifest says so.
"""

MERGE_EPILOG = """
--lambda-sweep writes one checkpoint per lambda in {1, 1.15, 1.75, 1.2, 1.25},
named <out stem>.lambda<value><suffix>, each with its own manifest. A sweep
implies --mode ortho_both.

The manifest (default <out stem>.manifest.json) records mode, k, lambda,
layers_merged, layers_skipped and clamped_layers.
"""

INSPECT = """
List tensor names, shapes and storage dtypes of a safetensors file.
"""

SCORE = """
Score an evaluation log (JSON lines, {"id": str, "outcomes": [bool, ...]}).

  pass_at_1  mean over questions of the fraction of correct samples
  pass_at_k  unbiased pass@k estimate, 1 - C(n-c, k) / C(n, k)
  safety     fraction of records judged safe (or harmful), one verdict each
"""

TOYTRAIN = """
Run the desk-scale interference experiment: fine-tune a random two-layer
"reasoning" network on a task that differs by a rank-1 change, and measure
how much of the first task is lost. Flags override the scenario file.
"""

TOYTRAIN_EPILOG = """
Scenario JSON keys: seed, epochs, lr, weight_decay, mode, r, alpha, penalty,
penalty_warmup, track_retention, dims, n_samples. penalty is null or
{"variant": "col"|"both", "beta": number, "base_rank": int|null|"exact", "eps": number}.
In lora mode r may not exceed the smallest of dims.

--compare runs the full, lora and penalized lora arms and reports whether
full fine-tuning forgot more, whether lora stayed within rank r, and whether
the penalty lowered m1 and m3.
"""
