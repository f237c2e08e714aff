"""Multiplication counts per channel use, and how they scale."""

from ampgnn import bench

sizes = [(64, 64), (256, 256), (1024, 1024)]
rep = bench.complexity_report(sizes)
print(rep.to_csv(4))
for note in rep.notes:
    print("note:", note)

for det in ("amp", "amp-gnn"):
    a, b, c = (rep.count(det, m, n) for m, n in sizes)
    print(f"{det}: x{b / a:.2f} from 64 to 256, x{c / b:.2f} from 256 to 1024")

# the real-valued convention multiplies channel products by four
print("amp 64x64, real convention:", bench.amp_multiplications(64, 64, convention="real"))
