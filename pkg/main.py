"""aft_gehan_clustered 命令行入口.

    python main.py fit --input data/hiv_like.csv --covariates CD4,obstime,drug,gender,prevOI,AZT
    python main.py simulate --quick --threads 4
    python main.py verify
"""

import sys

from utils.aft.cli import main

if __name__ == "__main__":
    sys.exit(main())
