#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""python -m app"""

import sys

from app.cli import main

sys.exit(main())
