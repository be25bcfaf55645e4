# Empty init file