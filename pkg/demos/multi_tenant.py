"""GPT-small next to GPT-large on a 36-core chip, under fixed partitions
(MIG) and under topology-aware allocation."""

from npuvsim import experiments as ex

sc = ex.Scenario.load(ex.bundled_scenarios()["mig_vs_vnpu"])
table = ex.compare(["mig", "vnpu"], sc)
for mode in ("mig", "vnpu"):
    run = table["runs"][mode]
    print(f"{mode}: utilization {run['utilization']:.3f}")
    for vmid, vm in sorted(run["vms"].items()):
        print(f"  vm {vmid}: {vm['iterations_per_cycle'] * 1e6:.3f} iterations per Mcycle, "
              f"{vm['cores_used']} cores, {vm['tdm_switches']} context switches")
