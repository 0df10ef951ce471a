"""Load a CSV into a store; run as a subprocess by the crash-safety check."""

import sys

from branchstore import Repository

if __name__ == "__main__":
    store, csv_path = sys.argv[1], sys.argv[2]
    with Repository.open(store) as repo:
        print("ready", flush=True)
        uid, _ = repo.load_csv(csv_path, "table", "id", message="scripted load")
    print(uid, flush=True)
