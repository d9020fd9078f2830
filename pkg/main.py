#!/usr/bin/env python3
"""
main.py
Main entry point for the influence toolkit command line
"""

import sys
import traceback

import numpy as np

from cli import InfluenceCli
from config import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from data_models import InfluenceToolkitError
from logger_setup import setup_logger


def main(argv=None):
    """Run one command and return its exit code"""
    logger = setup_logger()
    argv = sys.argv[1:] if argv is None else argv
    exit_code = EXIT_OK

    try:
        InfluenceCli(logger).run(argv)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        exit_code = EXIT_USAGE
    except InfluenceToolkitError as e:
        logger.error("%s: %s", type(e).__name__, e)
        logger.debug("%s", traceback.format_exc())
        exit_code = e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        exit_code = EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error("Numerical failure: %s\n%s", str(e), traceback.format_exc())
        exit_code = EXIT_NUMERICAL
    except Exception as e:
        logger.error("Unhandled exception: %s\n%s", str(e), traceback.format_exc())
        exit_code = EXIT_USAGE
    finally:
        logger.debug("Exit code %d", exit_code)
    return exit_code


if __name__ == '__main__':
    sys.exit(main())
