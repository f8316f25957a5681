import sys

from noisy_ner.cli import main

sys.exit(main())
