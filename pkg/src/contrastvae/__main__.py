from contrastvae.cli import main
import sys

sys.exit(main())
