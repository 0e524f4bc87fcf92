"""Two clusters collide: watch two density maxima become one.

Uses the command-line tool end to end, then reads the track table back.

    python3 demos/merge_tracks.py [out_dir]
"""
import csv
import os
import sys

from kinetic_kde import cli, scenario as scen
from kinetic_kde.persistence import CellComplex, maxima_persistence

out = sys.argv[1] if len(sys.argv) > 1 else "merge_demo"
# epsilon 0.2 keeps each cluster's peak above the 2 epsilon persistence cut
args = ["--epsilon", "0.2", "--rho", "0.0296", "--coreset-epsilon", "0.05", "--out", out]
cli.main(["build", "builtin:merge"] + args)
cli.main(["simulate", os.path.join(out, "coreset.json"), "--snapshot-times", "0.2,0.4,0.6"])

with open(os.path.join(out, "tracks.csv")) as fh:
    tracks = list(csv.DictReader(fh))
for tr in tracks:
    print(f"track {tr['track_id']}: t in [{float(tr['start']):.3f}, {float(tr['end']):.3f}], "
          f"last seen near ({float(tr['x']):.2f}, {float(tr['y']):.2f})")

ended = sorted({float(tr["end"]) for tr in tracks if float(tr["end"]) < 1.0})
if ended:
    t_m = ended[0]
    sc = scen.merge_scenario()
    for t in (max(t_m - 0.1, 0.0), min(t_m + 0.15, sc.T)):
        r = scen.rasterize(sc, t, 128)
        dg = maxima_persistence(CellComplex.from_raster(r.heights))
        print(f"true density at t={t:.2f}: {int((dg.persistence > 0.05).sum())} peak(s) with persistence above 0.05")
print(f"snapshots, events and tracks in {out}/")
