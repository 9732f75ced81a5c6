"""Basic vs SP proposal module: measured stage timing and predicted MACs."""
from hypernet import HyperNetModel, benchmark_stages, desk_config, flop_estimate, generate_shapes_dataset

model = HyperNetModel.initialize(desk_config(), seed=0)
images = [s.image for s in generate_shapes_dataset(2, seed=1)]

recs = {v: benchmark_stages(model, images, v, runs=3) for v in ("basic", "sp")}
for v, r in recs.items():
    print(f"{v:>5}: proposal {r.proposal_ms:8.1f} ms  total {r.total_ms:8.1f} ms  ({r.num_candidates} candidates)")
print(f"measured proposal speedup x{recs['basic'].proposal_ms / recs['sp'].proposal_ms:.1f}")

n = recs["basic"].num_candidates
est = {v: flop_estimate(model.with_variant(v).proposal_spec, n, (32, 32)) for v in ("basic", "sp")}
print(f"per-candidate MACs: basic {est['basic']['per_candidate']:,}  sp {est['sp']['per_candidate']:,}"
      f"  ratio {est['basic']['per_candidate'] / est['sp']['per_candidate']:.1f}")
