"""Weight streaming through a 4-entry range TLB versus a 4-entry page TLB."""

from npuvsim.chip import ChipConfig
from npuvsim.experiments import translation_study

cfg = ChipConfig()
print(f"{'workload':<12}{'cores':>6}{'range':>10}{'page':>10}")
for name, cores in [("resnet18", 6), ("resnet34", 11), ("gpt-small", 12), ("gpt-large", 36)]:
    r = translation_study(cfg, name, cores)
    print(f"{name:<12}{cores:>6}{r['range_overhead']:>10.2%}{r['page_overhead']:>10.2%}")
