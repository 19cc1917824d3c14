import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'scribblemix.settings')
django.setup()
