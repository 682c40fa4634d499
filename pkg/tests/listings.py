"""Reference workflow files used across the tests.

MINIMAL_INFERENCE is the smallest useful configuration: one containerized
inference task on the local machine.  HITL_CHECKPOINT declares a training
stage followed by a review checkpoint that may re-activate the inference
task; inference_task itself is declared (so add_tasks can reference it) but
not initially active.
"""

MINIMAL_INFERENCE = """\
[[task]]
name = "inference_task"
command = "singularity run --nv \\
--bind <DATA_ROOT> <SIF_IMAGE> \\
src/main.py --config <CONFIG_FILE>"
execsite = "local"
input.model = "/path/to/model.pt"
input.data = "/path/to/images/"
output.results = "/path/to/results.json"

[workflow]
tasks = [
    "inference_task"
]
"""

HITL_CHECKPOINT = """\
[[task]]
name = "inference_task"
command = "singularity run --nv \\
--bind <DATA_ROOT> <SIF_IMAGE> \\
src/main.py --config <CONFIG_FILE>"
execsite = "local"
input.model = "/path/to/model.pt"
input.data = "/path/to/images/"
output.results = "/path/to/results.json"

[[task]]
name = "training_task"
command = "singularity run --nv \\
--bind <DATA_ROOT> <SIF_IMAGE> \\
src/main.py --config <CONFIG_FILE>"
depends_on = ["inference_task"]
execsite = "HPC-CLUSTER"
input.config = "<CONFIG_FILE>"
output.metrics = "<OUTPUT_MODELS_DIR>"

[[task]]
name = "hitl_reviewer_evaluation"
command = "modules.cif_core.hitl_review.hitl_epoch_reviewer"
execsite = "HPC-CLUSTER"
depends_on = ["training_task"]
add_tasks = ["inference_task"]

hitl.enabled = true
hitl.input = "/path/to/output/metrics.txt"
hitl.message = "Is the model good enough?\\n"
output.hitl_decision = "hitl_decision.json"

[execsites."HPC-CLUSTER"]
host = "hpc-login.example.org"
key = "/home/user/.ssh/id_ecdsa"
user = "user1234"

[workflow]
tasks = [ "training_task", "hitl_reviewer_evaluation"]
"""

COMMAND_ONE_LINE = (
    "singularity run --nv --bind <DATA_ROOT> <SIF_IMAGE> "
    "src/main.py --config <CONFIG_FILE>"
)
