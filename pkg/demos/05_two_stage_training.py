"""Both training stages on a short schedule, then held-out evaluation.

Stage 1 trains everything on streamed synthetic scenes. Stage 2 attaches
MoLE to each decoder FFN and trains only the router and the experts. The
shipped reference schedule (configs/*.json) is longer; pass --full to use it.
"""

import sys

from speechground import GroundingModel, eval_corpus, evaluate, finetune, pretrain, reference_config
from speechground.train import TrainConfig

full = "--full" in sys.argv
pre_cfg, fin_cfg = reference_config("pretrain"), reference_config("finetune")
if not full:
    pre_cfg = TrainConfig.from_dict({**pre_cfg.to_dict(), "max_steps": 400})
    fin_cfg = TrainConfig.from_dict({**fin_cfg.to_dict(), "max_steps": 50})


def progress(record):
    if record["step"] % 50 == 0:
        extra = f"  routing {record['routing'][0]}" if record["routing"] else ""
        print(f"  {record['stage']:8s} step {record['step']:5d}  l_det {record['l_det']:.3f}{extra}")


print(f"pre-training for {pre_cfg.total_steps} steps")
pre = pretrain(pre_cfg, progress)
print(f"fine-tuning MoLE for {fin_cfg.total_steps} steps")
fin = finetune(fin_cfg, pre, progress)

scenes = eval_corpus(pre_cfg.vocabulary(), eval_seed=0, count=100, params=pre_cfg.scene)
untrained = GroundingModel.create(pre_cfg.model, pre_cfg.init_seed)
for name, model in (("untrained", untrained), ("pretrained", pre), ("fine-tuned", fin)):
    r = evaluate(model, scenes)
    print(f"{name:11s} AP {r.ap:.3f}  AP50 {r.ap50:.3f}  AP75 {r.ap75:.3f}")
